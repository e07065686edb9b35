use bnrf::metrics::ssim;

// Reference values from scikit-image 0.25:
// structural_similarity(pred, gt, gaussian_weights=True, sigma=1.5,
//                       use_sample_covariance=False, data_range=1.0[, channel_axis=-1])
const GRAY_REFERENCE: f64 = 0.7749189824453138;
const RGB_REFERENCE: f64 = 0.8374951972347594;

const W: usize = 32;
const H: usize = 24;

fn grid(f: impl Fn(f64, f64) -> Vec<f64>) -> Vec<f64> {
    (0..H).flat_map(|y| (0..W).map(move |x| (x as f64, y as f64))).flat_map(|(x, y)| f(x, y)).collect()
}

fn gt_gray(x: f64, y: f64) -> f64 {
    0.5 + 0.4 * (0.3 * x).sin() * (0.2 * y).cos()
}

#[test]
fn grayscale_fixture_matches_reference() {
    let gt = grid(|x, y| vec![gt_gray(x, y)]);
    let pred = grid(|x, y| vec![(gt_gray(x, y) + 0.1 * (1.7 * x + 0.9 * y).sin()).clamp(0.0, 1.0)]);
    let s = ssim(&pred, &gt, W, H, 1).unwrap();
    assert!((s - GRAY_REFERENCE).abs() < 1e-3, "{s}");
}

#[test]
fn rgb_fixture_matches_reference() {
    let gt_px = |x: f64, y: f64| {
        let g = gt_gray(x, y);
        [g, 1.0 - g, 0.5 + 0.3 * (0.25 * x + 0.1 * y).cos()]
    };
    let gt = grid(|x, y| gt_px(x, y).to_vec());
    let pred = grid(|x, y| {
        let g = gt_px(x, y);
        let n = [(1.1 * x).sin(), (0.7 * y).cos(), (0.5 * x * y / 10.0).sin()];
        (0..3).map(|c| (g[c] + 0.08 * n[c]).clamp(0.0, 1.0)).collect()
    });
    let s = ssim(&pred, &gt, W, H, 3).unwrap();
    assert!((s - RGB_REFERENCE).abs() < 1e-3, "{s}");
}
