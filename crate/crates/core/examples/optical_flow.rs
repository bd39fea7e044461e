//! Dense and sparse Lucas-Kanade on a rendered frame pair, scored against
//! the exact planar flow, with errors grouped by texture.
//!
//! cargo run --release --example optical_flow

use lcmflow::experiment::SceneConfig;
use lcmflow::flow::{dense_flow, lucas_kanade, FlowField};
use lcmflow::geometry::{ground_truth_flow, Pose};
use lcmflow::synth::{frame_structure, make_texture, noisy_frame, sparse_points, TrajectoryKind};
use nalgebra::Vector3;

fn summary(name: &str, measured: &FlowField, truth: &FlowField, texture: impl Fn(usize) -> f64) {
    let mut by_decade = std::collections::BTreeMap::<i32, Vec<f64>>::new();
    for i in 0..measured.len() {
        if measured.valid[i] && truth.valid[i] {
            let decade = texture(i).max(1e-3).log10().floor() as i32;
            by_decade
                .entry(decade)
                .or_default()
                .push((measured.vectors[i] - truth.vectors[i]).norm());
        }
    }
    println!("{name}");
    for (d, mut e) in by_decade {
        e.sort_by(f64::total_cmp);
        println!(
            "  t2 in [1e{d}, 1e{}): n {:6} median error {:.3} px",
            d + 1,
            e.len(),
            e[e.len() / 2]
        );
    }
}

fn main() -> lcmflow::Result<()> {
    let spec = SceneConfig::default().dataset(TrajectoryKind::Static, 2, 7)?;
    let texture = make_texture(&spec.scene)?;
    let prev_pose = Pose::new(Vector3::zeros(), 0.0, 0.0, 0.0);
    let next_pose = Pose::new(Vector3::new(0.1, 0.03, 0.05), 0.02, 0.0, 0.0);
    let (prev, depth) = noisy_frame(&texture, &spec, &prev_pose, 0)?;
    let (next, _) = noisy_frame(&texture, &spec, &next_pose, 1)?;
    let st = frame_structure(&prev, &spec)?;

    let dense = dense_flow(&prev, &next, &spec.lk)?;
    let truth = ground_truth_flow(
        &next_pose,
        &prev_pose,
        &dense.positions,
        &depth,
        &spec.camera,
    );
    summary("dense", &dense, &truth, |i| st.t2[i]);

    let points = sparse_points(&st, &spec);
    let sparse = lucas_kanade(&prev, &next, &points, &spec.lk)?;
    let truth = ground_truth_flow(&next_pose, &prev_pose, &points, &depth, &spec.camera);
    summary(
        &format!("sparse, {} corners", points.len()),
        &sparse,
        &truth,
        |i| st.nearest(&points[i]).1,
    );
    Ok(())
}
