//! Render one scene per distraction level and dump the rasters as PPM files.

use std::io::Write;

use dualdiff::simenv::{render, reset, DistractionLevel, KeywordResolver, MaskProvider, OracleMask, RasterSpec, Resolver, TaskId};
use dualdiff::nncore::Tensor;

fn write_ppm(path: &std::path::Path, img: &Tensor<f32>) -> std::io::Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)
}

fn main() -> dualdiff::Result<()> {
    let raster = RasterSpec { lr_side: 32, factor: 2 };
    let out = std::env::temp_dir().join("dualdiff-render");
    std::fs::create_dir_all(&out)?;
    for level in DistractionLevel::ALL {
        let scene = reset(11, level, TaskId::Place);
        let obs = render(&scene, raster);
        let relevant = KeywordResolver.resolve(&scene.instruction, &scene)?;
        let mask = OracleMask(raster).mask(&scene, &relevant)?;
        println!(
            "{:<6} \"{}\"  objects {}  distractors {}  relevant {:?}",
            level.name(),
            scene.instruction,
            scene.objects.len(),
            scene.distractor_count(),
            relevant
        );
        write_ppm(&out.join(format!("{}-hr.ppm", level.name())), &obs.o_hr)?;
        write_ppm(&out.join(format!("{}-mask.ppm", level.name())), &mask)?;
    }
    println!("images in {}", out.display());
    Ok(())
}
