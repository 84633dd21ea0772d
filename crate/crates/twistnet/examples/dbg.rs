use twistnet::gradcheck::*;
use twistnet::stci::{MhStci, StciConfig};
use twistnet::tensor::rng::{ParamInit, Rng};
use twistnet::tensor::{Tensor, tape::Tape};
use twistnet::ops;

fn main() {
    for seed in [2002u64, 1, 2, 3] {
        let mut rng = Rng::new(seed);
        let init = ParamInit::new(2003);
        let cfg = StciConfig { in_channels: 8, reduced: 2, heads: 4, out_channels: 6, gn_groups: 4 };
        let mh: MhStci<f64> = MhStci::init(&init, "gc.mh", cfg).unwrap();
        let x: Tensor<f64> = rng.normal_tensor(&[1, 8, 4, 4], 0.0, 1.0).requires_grad();
        let r: Tensor<f64> = rng.normal_tensor(&[1, 6, 4, 4], 0.0, 1.0);
        let mut worst = (String::new(), 0.0f64);
        let mut tensors: Vec<(String, Tensor<f64>)> = vec![("x".into(), x.clone())];
        for (k, head) in mh.heads.iter().enumerate() {
            tensors.push((format!("head{k}.reduce"), head.reduce.weight.clone()));
            tensors.push((format!("head{k}.twist"), head.twist.weight.clone()));
            tensors.push((format!("head{k}.scale"), head.scale.clone()));
        }
        tensors.push(("ais.w1".into(), mh.ais_w1.weight.clone()));
        tensors.push(("ais.w2".into(), mh.ais_w2.weight.clone()));
        tensors.push(("gn.gamma".into(), mh.gn.gamma.clone()));
        tensors.push(("proj".into(), mh.proj.weight.clone()));
        for (name, t) in &tensors {
            let refs = [(name.as_str(), t)];
            let out = finite_diff_check(name, &refs, |tape| {
                let o = mh.forward(tape, &x, true, None)?;
                Ok(ops::sum(tape, &ops::mul(tape, &o, &r)?))
            }).unwrap();
            if out.max_rel_err > worst.1 { worst = (name.clone(), out.max_rel_err); }
            if out.max_rel_err > 1e-4 { println!("seed {seed} {name}: {:.3e}", out.max_rel_err); }
        }
        println!("seed {seed} worst: {} {:.3e}", worst.0, worst.1);
    }
}
