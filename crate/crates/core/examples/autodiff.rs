//! Reverse-mode gradients of a small network, checked against central
//! differences.
//!
//! cargo run --example autodiff

use tacrl::autodiff::nn::Mlp;
use tacrl::autodiff::{value_and_grad, Binding, Graph, ParamStore};
use tacrl::rng::{seeded, uniform_vec};

fn main() -> tacrl::Result<()> {
    let mut rng = seeded(0);
    let net = Mlp::new("net", vec![3, 16, 1]);
    let mut params = ParamStore::new();
    net.init(&mut params, &mut rng)?;
    let x = uniform_vec(&mut rng, 8 * 3, -1.0, 1.0);
    let target = uniform_vec(&mut rng, 8, -1.0, 1.0);

    let loss = |p: Binding<'_>, g: &mut Graph| {
        let xv = g.input(8, 3, x.clone())?;
        let y = net.forward(g, p, xv)?;
        let t = g.input(8, 1, target.clone())?;
        let e = g.sub(y, t)?;
        let sq = g.square(e);
        Ok(g.mean(sq))
    };
    let (value, grads) = value_and_grad(|g| loss(Binding::trainable(&params), g))?;
    println!("loss {value:.6}");

    let eps = 1e-5;
    for path in params.paths().cloned().collect::<Vec<_>>() {
        let analytic = grads.get(&path)?.values[0];
        let probe = |delta: f64| -> tacrl::Result<f64> {
            let mut p = params.clone();
            p.get_mut(&path)?.values[0] += delta;
            let mut g = Graph::new();
            let v = loss(Binding::frozen(&p), &mut g)?;
            Ok(g.scalar(v))
        };
        let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
        println!("{path:<16} analytic {analytic:+.8}  numeric {numeric:+.8}");
    }
    Ok(())
}
