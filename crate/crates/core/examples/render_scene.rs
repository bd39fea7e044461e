//! Renders one frame of the textured plane, its depth and structure-tensor
//! texture, and writes the frame as a PGM.
//!
//! cargo run --release --example render_scene -- [out.pgm]

use lcmflow::experiment::SceneConfig;
use lcmflow::geometry::Pose;
use lcmflow::imaging::structure_field;
use lcmflow::synth::{make_texture, noisy_frame, TrajectoryKind};
use nalgebra::Vector3;

fn main() -> lcmflow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "frame.pgm".into());
    let spec = SceneConfig::default().dataset(TrajectoryKind::Static, 2, 42)?;
    let texture = make_texture(&spec.scene)?;
    let pose = Pose::new(Vector3::new(0.3, -0.2, 0.0), 0.1, 0.15, 0.0);
    let (img, depth) = noisy_frame(&texture, &spec, &pose, 0)?;
    img.write_pgm(std::path::Path::new(&out))?;

    let z: Vec<f64> = depth.inverse_depth.iter().map(|d| 1.0 / d).collect();
    let (zmin, zmax) = z
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
    println!(
        "{}x{} frame written to {out}; depth {zmin:.3}..{zmax:.3} m",
        img.width, img.height
    );

    // Texture is the structure tensor's smaller eigenvalue spread over decades.
    let st = structure_field(
        &img,
        spec.structure_window,
        spec.structure_window as f64 / 6.0,
    )?;
    let mut t2 = st.t2.clone();
    t2.sort_by(f64::total_cmp);
    for q in [0.01, 0.1, 0.5, 0.9, 0.99] {
        println!(
            "t2 quantile {q:>4}: {:>10.2}",
            t2[((t2.len() - 1) as f64 * q) as usize]
        );
    }
    Ok(())
}
