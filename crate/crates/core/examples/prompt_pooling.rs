//! Query pooling turns a prompt of any length into exactly `K` tokens, and
//! attention pooling into one vector; neither sees the padding.

use pflux::encoders::{AttnPool, QueryPool};
use pflux::nn::Init;
use pflux::numerics::{CounterRng, Tensor};

fn main() {
    let (d, k) = (32, 16);
    let mut rng = CounterRng::new(3);
    let mut init = Init::new(&mut rng);
    let qp = QueryPool::<f64>::new(&mut init, k, d, d, 4);
    let ap = AttnPool::<f64>::new(&mut init, d, d, d);
    let mut data = CounterRng::new(4);
    for len in [8, 40, 200] {
        let valid = data.normal_vec(len * d);
        let pooled = |pad: usize, data: &mut CounterRng| {
            let mut v = valid.clone();
            v.extend(data.normal_vec(pad * d).iter().map(|x| 100.0 * x));
            let x = Tensor::from_f64(&[1, len + pad, d], &v).unwrap();
            (qp.forward(&x, &[len]).unwrap(), ap.forward(&x, &[len]).unwrap())
        };
        let (q0, a0) = pooled(0, &mut data);
        let (q1, a1) = pooled(37, &mut data);
        let dev = |a: &Tensor<f64>, b: &Tensor<f64>| a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        println!(
            "len {len:>3}: query pool {:?}, attn pool {:?}; deviation under 37 padded frames {:.1e} / {:.1e}",
            q0.shape(),
            a0.shape(),
            dev(&q0, &q1),
            dev(&a0, &a1)
        );
    }
}
