mod common;

use common::{random_frame, rng};
use hvpp_core::checkpoint::{from_bytes, to_bytes};
use hvpp_core::graph::Graph;
use hvpp_core::network::{enhance_444, enhance_frame, forward, forward_patch, param_count_closed_form, param_specs};
use hvpp_core::yuv::{make_qp_plane, upsample_420_to_444};
use hvpp_core::{Frame444, FusionMode, ModelConfig, ParameterStore};

fn small(tile: usize, overlap: usize) -> ModelConfig {
    ModelConfig {
        channels: 8,
        heads: 2,
        num_hfb: 1,
        window_side: 2,
        tile_size: tile,
        tile_overlap: overlap,
        ..ModelConfig::default()
    }
}

fn frame444(w: usize, h: usize, seed: u64) -> Frame444 {
    upsample_420_to_444(&random_frame(w, h, &mut rng(seed)))
}

#[test]
fn identity_model_is_bit_exact_for_any_tiling() {
    for (tile, overlap) in [(16, 8), (32, 8), (32, 16), (64, 0), (128, 16)] {
        let mut p = ParameterStore::init(&small(tile, overlap), 5).unwrap();
        p.zero_residual();
        for (w, h) in [(48, 32), (50, 38), (20, 100), (6, 2)] {
            let f = random_frame(w, h, &mut rng((w * h) as u64));
            assert_eq!(enhance_frame(&p, &f, 37).unwrap(), f, "tile {tile}/{overlap} frame {w}x{h}");
        }
    }
}

#[test]
fn one_tile_equals_direct_forward() {
    let p = ParameterStore::init(&small(64, 8), 2).unwrap();
    let f = frame444(32, 24, 1);
    let direct = forward_patch(&p, &f, &make_qp_plane(30, 32, 24).unwrap()).unwrap();
    let tiled = enhance_444(&p, &f, 30).unwrap();
    for (a, b) in direct.planes.data().iter().zip(tiled.planes.data()) {
        assert_eq!(a.clamp(0.0, 1.0), *b);
    }
}

#[test]
fn overlapping_tiles_stay_close_to_single_tile() {
    let whole = ParameterStore::init(&small(64, 8), 3).unwrap();
    let mut tiled = whole.clone();
    tiled.config.tile_size = 32;
    tiled.config.tile_overlap = 16;
    let f = frame444(64, 64, 4);
    let a = enhance_444(&whole, &f, 32).unwrap();
    let b = enhance_444(&tiled, &f, 32).unwrap();
    let max = a
        .planes
        .data()
        .iter()
        .zip(b.planes.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    // tiles see less context, so values differ, but only mildly
    assert!(max < 0.25, "{max}");
}

#[test]
fn single_and_double_precision_forward_agree() {
    let cfg = small(32, 8);
    let p = ParameterStore::init(&cfg, 9).unwrap();
    let f = frame444(16, 16, 2);
    let q = make_qp_plane(42, 16, 16).unwrap();
    let single = forward_patch(&p, &f, &q).unwrap();
    let mut g = Graph::<f64>::new();
    let nodes = p.bind(&mut g, false);
    let x = g.constant(f.planes.cast());
    let qn = g.constant(q.plane.cast());
    let out = forward(&mut g, &nodes, &cfg, x, qn).unwrap();
    let max = g
        .value(out)
        .data()
        .iter()
        .zip(single.planes.data())
        .map(|(d, s)| (d - *s as f64).abs())
        .fold(0.0, f64::max);
    assert!(max < 1e-4, "{max}");
}

#[test]
fn qp_plane_conditions_the_output() {
    let p = ParameterStore::init(&small(32, 8), 1).unwrap();
    let f = frame444(16, 16, 3);
    let a = forward_patch(&p, &f, &make_qp_plane(22, 16, 16).unwrap()).unwrap();
    let b = forward_patch(&p, &f, &make_qp_plane(42, 16, 16).unwrap()).unwrap();
    assert_ne!(a, b);
}

#[test]
fn parameter_counts() {
    let mut configs = vec![ModelConfig::default(), ModelConfig::desk(), small(32, 8)];
    for mode in FusionMode::ALL {
        configs.push(ModelConfig { fusion_mode: mode, ..small(32, 8) });
    }
    for cfg in &configs {
        let p = ParameterStore::init(cfg, 0).unwrap();
        assert_eq!(p.num_params(), param_count_closed_form(cfg), "{cfg:?}");
        assert_eq!(p.arrays.len(), param_specs(cfg).len());
    }
    let full = ParameterStore::init(&ModelConfig::default(), 0).unwrap().num_params();
    let spatial = ParameterStore::init(&ModelConfig { fusion_mode: FusionMode::SpatialOnly, ..Default::default() }, 0)
        .unwrap()
        .num_params();
    assert!(spatial < full);
}

#[test]
fn checkpoint_bytes_round_trip_preserves_outputs() {
    let p = ParameterStore::init(&small(32, 8), 11).unwrap();
    let back = from_bytes(&to_bytes(&p)).unwrap();
    assert_eq!(back, p);
    let f = random_frame(16, 16, &mut rng(0));
    assert_eq!(enhance_frame(&p, &f, 27).unwrap(), enhance_frame(&back, &f, 27).unwrap());
}

#[test]
fn enhanced_samples_stay_in_range() {
    let mut p = ParameterStore::init(&small(32, 8), 4).unwrap();
    // exaggerate the residual so clamping matters
    for v in p.get_mut("conv_out.weight").unwrap().data_mut() {
        *v *= 50.0;
    }
    let f = frame444(24, 24, 8);
    let out = enhance_444(&p, &f, 50).unwrap();
    assert!(out.planes.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(out.planes.data().iter().any(|&v| v == 0.0 || v == 1.0));
}
