use npfx::baselines::{EmImputer, Imputer, LocfImputer, MeanImputer, OpticalFlowImputer, OtImputer};
use npfx::eval::{dump_flow, flow_magnitude_split, run_benchmark, MaskConfig};
use npfx::metrics::MetricConfig;
use npfx::model::{train_with, ImputeOptions, ModelConfig, TrainConfig};
use npfx::synthdata::{generate, load_dataset, mask, save_dataset, BlobShape, DomainSpec, FrameSequence, Mode};

fn displacements(seqs: &[FrameSequence]) -> Vec<f64> {
    let mut out = Vec::new();
    for s in seqs {
        let c = s.centers.as_ref().expect("generator metadata");
        for k in 1..c.len() {
            out.push(c[k][0][0] - c[k - 1][0][0]);
            out.push(c[k][0][1] - c[k - 1][0][1]);
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn domains_sharing_a_trajectory_family_share_dynamics() {
    let a = DomainSpec::domain_a();
    let other = DomainSpec {
        name: "ring-linear".into(),
        blob_shape: BlobShape::Ring,
        blob_size: 3.0,
        noise: 0.02,
        sparsity_threshold: 0.05,
        ..a.clone()
    };
    let b = DomainSpec::domain_b();
    let circular = DomainSpec {
        name: "gaussian-circular".into(),
        blob_shape: BlobShape::Gaussian,
        blob_size: 2.0,
        noise: 0.01,
        ..b.clone()
    };
    for (x, y) in [(&a, &other), (&b, &circular)] {
        let dx = displacements(&generate(x, 20, 10, 9).unwrap());
        let dy = displacements(&generate(y, 20, 10, 9).unwrap());
        let r = pearson(&dx, &dy);
        assert!(r > 0.9, "{} vs {}: correlation {r}", x.name, y.name);
    }
}

#[test]
fn saved_dataset_benchmarks_like_the_generated_one() {
    let spec = DomainSpec::domain_a();
    let windows = generate(&spec, 4, 10, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &spec, 3, &windows).unwrap();
    let (_, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, windows);

    let (mean, locf, em, of, ot) = (MeanImputer, LocfImputer, EmImputer::default(), OpticalFlowImputer::default(), OtImputer::default());
    let imputers: [&dyn Imputer; 5] = [&mean, &locf, &em, &of, &ot];
    let run = |data: &[FrameSequence]| {
        run_benchmark(&imputers, data, &MaskConfig::default(), &MetricConfig::default(), &spec.calibration).unwrap()
    };
    let (x, y) = (run(&windows), run(&loaded));
    assert_eq!(serde_json::to_string(&x).unwrap(), serde_json::to_string(&y).unwrap());
    assert_eq!(x.rows.len(), 5);
    assert!(x.rows.iter().all(|r| r.failures.is_empty()));
}

#[test]
fn trained_flow_concentrates_on_the_moving_blob() {
    let spec = DomainSpec::domain_a();
    let train = generate(&spec, 40, 10, 1).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 8, learning_rate: 3e-3, seed: 1, ..TrainConfig::default() };
    let model = train_with(&train, &ModelConfig::default(), &cfg, |_| {}).unwrap().model;

    let held = generate(&spec, 10, 10, 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (mut inside, mut outside, mut frames) = (0.0, 0.0, 0);
    for (i, w) in held.iter().enumerate() {
        let inter = mask(w, 0.5, Mode::Interpolation, i as u64).unwrap();
        let files = dump_flow(&model, &inter, &ImputeOptions::default(), &dir.path().join(i.to_string())).unwrap();
        assert_eq!(files.len(), 2 * inter.masked_indices.len());
        let out = model.impute(&inter, &ImputeOptions::default()).unwrap();
        let centers = w.centers.as_ref().unwrap();
        for (q, flow) in out.flows.iter().enumerate() {
            let [r, c] = centers[inter.masked_indices[q]][0];
            let clip = |v: f64| (v.round() as i64).clamp(0, 32) as usize;
            let (i_mag, o_mag) =
                flow_magnitude_split(flow.as_ref().unwrap(), clip(r - 4.0), clip(r + 5.0), clip(c - 4.0), clip(c + 5.0)).unwrap();
            inside += i_mag;
            outside += o_mag;
            frames += 1;
        }
    }
    assert!(inside > outside, "mean inside {} vs outside {} over {frames} frames", inside / frames as f64, outside / frames as f64);
}
