//! One perception forward pass: stream shapes, and the low-res encoder
//! parameters reused by the mask branch.

use dualdiff::nncore::{Graph, ParamStore, Tensor};
use dualdiff::perception::{Perception, Toggles};
use dualdiff::pipeline::TrainConfig;
use dualdiff::simenv::{render, reset, DistractionLevel, KeywordResolver, MaskProvider, OracleMask, Resolver, TaskId};

fn main() -> dualdiff::Result<()> {
    let cfg = TrainConfig::compact();
    let mut ps = ParamStore::<f32>::new(0);
    let p = Perception::new(&mut ps, cfg.perception, Toggles::default())?;
    let scene = reset(2, DistractionLevel::Severe, TaskId::Place);
    let obs = render(&scene, cfg.raster());
    let relevant = KeywordResolver.resolve(&scene.instruction, &scene)?;
    let mask = OracleMask(cfg.raster()).mask(&scene, &relevant)?;
    let add1 = |t: Tensor<f32>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(&s)
    };
    let mut g = Graph::new();
    let b = ps.bind(&mut g, false);
    let lr = g.constant(add1(obs.o_lr)?);
    let hr = g.constant(add1(obs.o_hr)?);
    let mk = g.constant(add1(mask)?);
    let out = p.forward(&mut g, &b, lr, hr, mk)?;
    for (name, v) in [("F_lr", out.f_lr), ("F_hr", out.f_hr), ("F_dr", Some(out.f_dr)), ("F_mask", Some(out.f_mask)), ("F_sem", Some(out.f_sem))] {
        if let Some(v) = v {
            println!("{name:<7} {:?}", g.shape(v));
        }
    }
    let shared = p.shared_params();
    println!(
        "mask branch reuses {} low-res encoder tensors: {}",
        shared.len(),
        shared == p.mask_encoder_params()
    );
    println!("perception parameters: {}", p.params().iter().map(|&id| ps.get(id).numel()).sum::<usize>());
    Ok(())
}
