use proptest::prelude::*;
use vlsplat::raster::{
    rasterize, rasterize_backward, rasterize_reference, IndicatorMode, RasterSettings,
};
use vlsplat::scene::{FeatureMap, Image};
use vlsplat::testing::random_scene;

const MODES: [IndicatorMode; 4] = [
    IndicatorMode::Learned,
    IndicatorMode::ColorOpacity,
    IndicatorMode::Fixed(0.5),
    IndicatorMode::Fixed(1.0),
];

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn tiled_matches_reference_in_every_mode() {
    for seed in 0..40 {
        let s = random_scene(seed, 50, 32);
        for mode in MODES {
            for settings in [
                RasterSettings::default(),
                RasterSettings {
                    tile_size: 5,
                    ..RasterSettings::exact()
                },
            ] {
                let a = rasterize(&s.cloud, &s.camera, &s.fusion, mode, &settings);
                let b = rasterize_reference(&s.cloud, &s.camera, &s.fusion, mode, &settings);
                assert!(
                    max_diff(&a.color.data, &b.color.data) < 1e-9,
                    "seed {seed} {mode:?}"
                );
                assert!(
                    max_diff(&a.semantics.data, &b.semantics.data) < 1e-9,
                    "seed {seed} {mode:?}"
                );
            }
        }
    }
}

#[test]
fn parallel_and_serial_tiles_are_bitwise_equal() {
    for seed in 0..10 {
        let s = random_scene(seed, 50, 32);
        let par = RasterSettings {
            tile_size: 4,
            ..RasterSettings::default()
        };
        let ser = RasterSettings {
            parallel: false,
            ..par
        };
        let a = rasterize(&s.cloud, &s.camera, &s.fusion, IndicatorMode::Learned, &par);
        let b = rasterize(&s.cloud, &s.camera, &s.fusion, IndicatorMode::Learned, &ser);
        assert_eq!(a, b);
        let dc = Image::from_data(
            a.color.width,
            a.color.height,
            3,
            vec![0.3; a.color.data.len()],
        )
        .unwrap();
        let df = FeatureMap::from_data(
            a.semantics.width,
            a.semantics.height,
            a.semantics.channels,
            vec![-0.2; a.semantics.data.len()],
        )
        .unwrap();
        let ga = rasterize_backward(
            &s.cloud,
            &s.camera,
            &s.fusion,
            IndicatorMode::Learned,
            &par,
            &a,
            &dc,
            &df,
        )
        .unwrap();
        let gb = rasterize_backward(
            &s.cloud,
            &s.camera,
            &s.fusion,
            IndicatorMode::Learned,
            &ser,
            &b,
            &dc,
            &df,
        )
        .unwrap();
        assert_eq!(ga, gb);
    }
}

#[test]
fn indicator_equal_to_opacity_reproduces_color_opacity_mode() {
    for seed in 0..20 {
        let mut s = random_scene(seed, 50, 32);
        s.cloud.indicator_logits = s.cloud.opacity_logits.clone();
        let settings = RasterSettings::default();
        let a = rasterize(
            &s.cloud,
            &s.camera,
            &s.fusion,
            IndicatorMode::Learned,
            &settings,
        );
        let b = rasterize(
            &s.cloud,
            &s.camera,
            &s.fusion,
            IndicatorMode::ColorOpacity,
            &settings,
        );
        assert_eq!(a.color.data, b.color.data);
        assert_eq!(a.semantics.data, b.semantics.data);
    }
}

#[test]
fn gradients_stay_in_their_modality() {
    for seed in 0..20 {
        let s = random_scene(seed, 50, 32);
        let settings = RasterSettings::default();
        let out = rasterize(
            &s.cloud,
            &s.camera,
            &s.fusion,
            IndicatorMode::Learned,
            &settings,
        );
        let (w, h, df) = (out.color.width, out.color.height, out.semantics.channels);
        let ones_c = Image::from_data(w, h, 3, vec![1.0; w * h * 3]).unwrap();
        let ones_f = FeatureMap::from_data(w, h, df, vec![1.0; w * h * df]).unwrap();
        let g = rasterize_backward(
            &s.cloud,
            &s.camera,
            &s.fusion,
            IndicatorMode::Learned,
            &settings,
            &out,
            &ones_c,
            &FeatureMap::zeros(w, h, df),
        )
        .unwrap();
        assert!(g.cloud.indicator_logits.iter().all(|v| *v == 0.0));
        let g = rasterize_backward(
            &s.cloud,
            &s.camera,
            &s.fusion,
            IndicatorMode::Learned,
            &settings,
            &out,
            &Image::zeros(w, h, 3),
            &ones_f,
        )
        .unwrap();
        assert!(g.cloud.opacity_logits.iter().all(|v| *v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn storage_order_does_not_change_the_image(seed in 0u64..10_000, rot in 0usize..50) {
        let s = random_scene(seed, 30, 16);
        let n = s.cloud.len();
        prop_assume!(n > 1);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        let p = s.cloud.permuted(&perm);
        let settings = RasterSettings::default();
        let a = rasterize(&s.cloud, &s.camera, &s.fusion, IndicatorMode::Learned, &settings);
        let b = rasterize(&p, &s.camera, &s.fusion, IndicatorMode::Learned, &settings);
        prop_assert_eq!(a.color.data, b.color.data);
        prop_assert_eq!(a.semantics.data, b.semantics.data);
    }

    #[test]
    fn outputs_are_bounded_by_the_fused_values(seed in 0u64..10_000) {
        let s = random_scene(seed, 30, 16);
        let out = rasterize(&s.cloud, &s.camera, &s.fusion, IndicatorMode::Learned, &RasterSettings::default());
        for t in out.aux.final_transmittance_color.iter().chain(&out.aux.final_transmittance_language) {
            prop_assert!((0.0..=1.0).contains(t));
        }
        prop_assert!(out.color.is_finite() && out.semantics.is_finite());
    }
}
