//! Checkpoints are self-describing: they carry the architecture, the
//! normalization statistics and every parameter, and refuse to load into
//! the wrong model.

use pflux::checkpoint::{Checkpoint, ModelKind};
use pflux::decoders::{AfConfig, AfModel};
use pflux::flowode::NormStats;
use pflux::harness::train::{load_af, load_dg};
use pflux::nn::{perturb_params, Module};
use pflux::numerics::CounterRng;

fn main() {
    let config = AfConfig { d_model: 32, heads: 4, n_blocks: 2, ..AfConfig::default() };
    let model = AfModel::<f32>::new(config.clone(), 9).unwrap();
    perturb_params(&model, &mut CounterRng::new(1), 0.1);
    let norm = NormStats::identity(config.n_mel);
    let ckpt = Checkpoint::capture(ModelKind::Af, config.descriptor(), norm, 9, &model);
    let bytes = ckpt.to_bytes();
    println!("{} parameters in {} tensors, {} bytes", model.param_count(), ckpt.params.len(), bytes.len());

    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let restored = load_af(&back).unwrap();
    let same = model.params().iter().zip(restored.params()).all(|(a, b)| a.to_vec() == b.to_vec());
    println!("round trip restores every value: {same}");

    println!("loading as DG: {}", load_dg(&back).unwrap_err());
    let other = AfModel::<f32>::new(AfConfig { n_blocks: 3, ..config }, 9).unwrap();
    println!("restoring into a deeper AF: {}", back.restore_into(&other).unwrap_err());
    println!("truncated file: {}", Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err());
}
