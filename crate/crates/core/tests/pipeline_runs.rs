use hsims::eval::evaluate;
use hsims::kmeans::{kmeans, labels_to_field};
use hsims::pipeline::{run, segment, segment_from, IndicatorMode, PipelineConfig};
use hsims::synth::{generate, ClusterSpec, Region, SynthSpec};
use hsims::{HyperCube, Rng};
use proptest::prelude::*;

fn diag(sd: &[f64]) -> Vec<Vec<f64>> {
    (0..sd.len())
        .map(|r| (0..sd.len()).map(|c| if r == c { sd[r] * sd[r] } else { 0.0 }).collect())
        .collect()
}

/// Three vertical stripes with distinct anisotropic spreads.
fn stripes(seed: u64, side: usize) -> SynthSpec {
    let third = side / 3;
    let cluster = |mean: Vec<f64>, sd: &[f64], left: usize, width: usize| ClusterSpec {
        mean,
        covariance: diag(sd),
        region: Region { top: 0, left, height: side, width },
    };
    SynthSpec {
        height: side,
        width: side,
        clusters: vec![
            cluster(vec![0.2, 0.3, 0.5, 0.4], &[0.05, 0.01, 0.01, 0.01], 0, third),
            cluster(vec![0.6, 0.3, 0.4, 0.5], &[0.01, 0.05, 0.01, 0.01], third, third),
            cluster(vec![0.4, 0.7, 0.6, 0.3], &[0.01, 0.01, 0.05, 0.02], 2 * third, side - 2 * third),
        ],
        noise_snr: Some(30.0),
        seed,
    }
}

fn ids(labels: &[usize]) -> Vec<u16> {
    labels.iter().map(|&l| l as u16).collect()
}

/// Number of 4-connected components of a label image.
fn components(labels: &[usize], h: usize, w: usize) -> usize {
    let mut seen = vec![false; labels.len()];
    let mut count = 0;
    for start in 0..labels.len() {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == labels[p] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
    }
    count
}

#[test]
fn robust_mode_recovers_stripes() {
    let (cube, gt) = generate(&stripes(1, 30)).unwrap();
    let seg = segment(&cube, &PipelineConfig::new(3, 1e-3, 1e-3)).unwrap();
    let report = evaluate(&ids(&seg.label_ids()), &gt, 3).unwrap();
    assert!(report.oa >= 0.99, "oa {}", report.oa);
    assert!(seg.labels.is_one_hot());
    assert_eq!(seg.models.len(), 3);
    for record in &seg.trace {
        assert!(record.objective.is_finite());
        assert_eq!(record.segment_sizes.iter().sum::<usize>(), cube.len());
    }
}

#[test]
fn runs_are_bit_identical() {
    let (cube, _) = generate(&stripes(2, 24)).unwrap();
    let mut cfg = PipelineConfig::new(3, 0.05, 1e-3);
    cfg.seed = 5;
    let a = segment(&cube, &cfg).unwrap();
    let b = segment(&cube, &cfg).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.means, b.means);
    let objectives = |s: &hsims::pipeline::Segmentation| s.trace.iter().map(|r| r.objective.to_bits()).collect::<Vec<_>>();
    assert_eq!(objectives(&a), objectives(&b));
}

#[test]
fn large_lambda_reduces_fragmentation() {
    let (cube, _) = generate(&stripes(3, 24)).unwrap();
    let (h, w) = (cube.height(), cube.width());
    for mode in [IndicatorMode::RobustAnisotropic, IndicatorMode::SquaredEuclidean] {
        let mut free = PipelineConfig::new(3, 0.0, 1e-3);
        free.indicator_mode = mode;
        let mut smooth = free.clone();
        smooth.lambda = 1e3;
        let rough = segment(&cube, &free).unwrap();
        let flat = segment(&cube, &smooth).unwrap();
        let (nr, nf) = (components(&rough.label_ids(), h, w), components(&flat.label_ids(), h, w));
        assert!(nf <= nr, "{mode:?}: {nf} components at λ = 1e3 vs {nr} at λ = 0");
        assert!(flat.labels.is_one_hot());
    }
}

#[test]
fn emptied_segments_keep_their_model() {
    let (cube, _) = generate(&stripes(4, 18)).unwrap();
    // a fourth segment seeded with a single pixel in the middle of a stripe
    // is absorbed by its neighbors under strong smoothing
    let mut labels: Vec<usize> = (0..cube.len()).map(|p| (p % 18) / 6 + 1).collect();
    labels[9 * 18 + 3] = 4;
    let u0 = labels_to_field(&labels, 18, 18, 4).unwrap();
    let mut cfg = PipelineConfig::new(4, 0.5, 1e-3);
    cfg.outer_max = 3;
    let seg = segment_from(&cube, u0, &cfg).unwrap();
    assert_eq!(seg.trace[0].segment_sizes[3], 0);
    assert_eq!(seg.models.len(), 4);
    // the frozen model is the single-pixel fit from the first iteration
    for (a, b) in seg.models[3].mu.iter().zip(cube.pixel_spectrum(9, 3).unwrap()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn full_run_with_mnf() {
    let (cube, gt) = generate(&stripes(5, 30)).unwrap();
    let mut cfg = PipelineConfig::new(3, 1e-3, 1e-3);
    cfg.mnf_kept = Some(3);
    let seg = run(&cube, &cfg).unwrap();
    assert_eq!(seg.means[0].len(), 3);
    let report = evaluate(&ids(&seg.label_ids()), &gt, 3).unwrap();
    assert!(report.oa >= 0.95, "oa {}", report.oa);

    cfg.mnf_kept = Some(5);
    assert!(run(&cube, &cfg).is_err());
}

#[test]
fn invalid_configuration_is_rejected_before_work() {
    let cube = HyperCube::zeros(4, 4, 2).unwrap();
    assert!(segment(&cube, &PipelineConfig::new(2, -1.0, 1e-3)).is_err());
    assert!(segment(&cube, &PipelineConfig::new(2, 0.1, 0.0)).is_err());
    assert!(segment(&cube, &PipelineConfig::new(0, 0.1, 1e-3)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // λ = 0 in squared-Euclidean mode is Lloyd's iteration, so a converged
    // k-means partition is a fixed point of the loop
    #[test]
    fn zero_lambda_euclidean_loop_keeps_kmeans_partition(
        h in 2usize..12,
        w in 2usize..12,
        bands in 1usize..4,
        k in 2usize..5,
        seed in any::<u64>(),
    ) {
        prop_assume!(h * w >= k);
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..h * w * bands).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let cube = HyperCube::new(h, w, bands, data).unwrap();
        let km = kmeans(cube.data(), bands, k, &mut Rng::new(seed), 300).unwrap();
        prop_assume!(km.converged);
        let mut cfg = PipelineConfig::new(k, 0.0, 1e-3);
        cfg.indicator_mode = IndicatorMode::SquaredEuclidean;
        let seg = segment_from(&cube, labels_to_field(&km.labels, h, w, k).unwrap(), &cfg).unwrap();
        prop_assert_eq!(seg.label_ids(), km.labels);
    }
}
