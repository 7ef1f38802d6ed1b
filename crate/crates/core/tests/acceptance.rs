//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use omiprobe::annotate::{cohens_kappa, decoding_iou, AnnotationRecord, EntityStatus, Source, Status};
use omiprobe::corpus::{split_dataset, Decoding, Split, Subset};
use omiprobe::embed_store::{
    read_bundle, span_pool, synth_corpus, write_bundle, EmbedError, EmbeddingBundle, Role, Span, SpanIndex,
    SynthCorpusConfig, Variant,
};
use omiprobe::feature_reg::{train_logreg_numeric, LogRegConfig};
use omiprobe::probe_free::{build_cases, proportion_probe, Pooling, Target};
use omiprobe::probe_mlp::{
    control_random_labels, train_and_test, AdamW, AdamWParams, Dataset, FeatureMode, Flavor, Mlp, MlpConfig,
    ProbeCorpus,
};
use omiprobe::stats::{chi2_gof, chi2_independence, spearman};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_bundle(rng: &mut ChaCha8Rng, i: usize) -> EmbeddingBundle {
    let rows = rng.random_range(1..40);
    let cols = rng.random_range(1..32);
    let matrix = Array2::from_shape_fn((rows, cols), |_| loop {
        let v = f32::from_bits(rng.random::<u32>());
        if v.is_finite() {
            break v;
        }
    });
    let mut spans = Vec::new();
    let mut t = 0;
    while t < rows {
        let len = rng.random_range(1..=4).min(rows - t);
        let id = spans.len() as u32;
        spans.push(Span {
            unit_id: id,
            role: [Role::Subject, Role::Property, Role::Object][id as usize % 3],
            entity_surface: format!("e{id}"),
            token_start: t as u32,
            token_end: (t + len) as u32,
        });
        t += len + rng.random_range(0..3);
    }
    EmbeddingBundle {
        graph_id: format!("g{i}"),
        permutation_index: rng.random_range(0..6),
        variant: if i % 2 == 0 { Variant::Base } else { Variant::Unk(format!("e{}", i % 5)) },
        encoder_tag: "acceptance".into(),
        matrix,
        spans: SpanIndex(spans),
    }
}

fn format_round_trip() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let b = random_bundle(&mut rng, i);
        let path = dir.path().join(format!("b{i}.embx"));
        write_bundle(&b, &path).map_err(|e| e.to_string())?;
        let back = read_bundle(&path).map_err(|e| e.to_string())?;
        let same_bits = back.matrix.iter().zip(b.matrix.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same_bits || back.spans != b.spans || back.variant != b.variant || back.matrix.dim() != b.matrix.dim() {
            return Err(format!("bundle {i} differs after round trip"));
        }
    }
    let path = dir.path().join("b0.embx");
    let good = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut bad_magic = good.clone();
    bad_magic[3] ^= 0xff;
    std::fs::write(&path, &bad_magic).map_err(|e| e.to_string())?;
    let magic_rejected = matches!(read_bundle(&path), Err(EmbedError::Format { ref field, .. }) if field == "magic");
    std::fs::write(&path, &good[..good.len() - 1]).map_err(|e| e.to_string())?;
    let short_rejected = matches!(read_bundle(&path), Err(EmbedError::Format { ref field, .. }) if field == "data");
    let mut long = good.clone();
    long.extend_from_slice(&[0, 0, 0, 0]);
    std::fs::write(&path, &long).map_err(|e| e.to_string())?;
    let long_rejected = read_bundle(&path).is_err();
    let elapsed = start.elapsed();
    check(
        magic_rejected && short_rejected && long_rejected && elapsed < Duration::from_secs(10),
        format!(
            "1000 bundles bit-identical; bad magic rejected={magic_rejected}, truncated={short_rejected}, \
             trailing={long_rejected}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-30)
}

fn pooling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let mut b = random_bundle(&mut rng, i);
        b.matrix.mapv_inplace(|_| rng.random_range(-10.0f32..10.0));
        let p = span_pool(&b).map_err(|e| e.to_string())?;
        let n_units = b.spans.len();
        let d = b.matrix.ncols();
        let mut units = vec![vec![0.0f64; d]; n_units];
        for (u, s) in b.spans.units().iter().enumerate() {
            for c in 0..d {
                let mut sum = 0.0;
                for r in s.token_start..s.token_end {
                    sum += f64::from(b.matrix[[r as usize, c]]);
                }
                units[u][c] = sum / f64::from(s.token_end - s.token_start);
            }
        }
        let dim: Vec<f64> = (0..d).map(|c| units.iter().map(|u| u[c]).sum::<f64>() / n_units as f64).collect();
        let tok: Vec<f64> = units.iter().map(|u| u.iter().sum::<f64>() / d as f64).collect();
        let pairs = units
            .iter()
            .flatten()
            .zip(p.unit_matrix.iter())
            .chain(dim.iter().zip(p.dim_mean.iter()))
            .chain(tok.iter().zip(p.tok_mean.iter()));
        for (want, got) in pairs {
            if !rel_close(*want, *got, 1e-6) {
                return Err(format!("bundle {i}: {got} vs brute force {want}"));
            }
            worst = worst.max((want - got).abs() / want.abs().max(1e-30));
        }
    }
    Ok(format!("1000 bundles, worst relative deviation {worst:.2e}"))
}

fn flat(m: &Mlp) -> Vec<f64> {
    m.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>()).collect()
}

fn set_flat(m: &mut Mlp, v: &[f64]) {
    let mut k = 0;
    for l in &mut m.layers {
        for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *w = v[k];
            k += 1;
        }
    }
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 2];
    for layers in [1u8, 2] {
        for draw in 0..100 {
            let n_in = rng.random_range(2..8);
            let batch = rng.random_range(1..6);
            let cfg = MlpConfig { layers, hidden_size: rng.random_range(1..6), seed: draw, ..Default::default() };
            let mut model = Mlp::new(n_in, &cfg);
            let mut params = flat(&model);
            for p in &mut params {
                *p = rng.random_range(-1.5..1.5);
            }
            set_flat(&mut model, &params);
            let x = Array2::from_shape_fn((batch, n_in), |_| rng.random_range(-2.0..2.0));
            let y: Vec<f64> = (0..batch).map(|_| f64::from(rng.random_bool(0.5))).collect();
            let (_, grads) = model.loss_and_grad(x.view(), &y);
            let analytic = flat(&Mlp { layers: grads });
            let mut probe = model.clone();
            for i in 0..params.len() {
                let h = 1e-5;
                let mut p = params.clone();
                p[i] += h;
                set_flat(&mut probe, &p);
                let up = probe.loss(x.view(), &y);
                p[i] -= 2.0 * h;
                set_flat(&mut probe, &p);
                let down = probe.loss(x.view(), &y);
                let numeric = (up - down) / (2.0 * h);
                let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
                worst[usize::from(layers - 1)] = worst[usize::from(layers - 1)].max(err);
            }
        }
    }
    check(
        worst.iter().all(|w| *w < 1e-4),
        format!("100 draws each, worst relative error N1 {:.2e}, N2 {:.2e}", worst[0], worst[1]),
    )
}

fn optimizer_oracle() -> Outcome {
    let mut opt = AdamW::new(AdamWParams::new(1e-3, 0.01), &[1]);
    let mut w = [1.0f64];
    opt.step(&mut [&mut w[..]], &[&[0.5][..]]);
    // w(1 - lr·λ) - lr·ĝ/(√v̂ + ε) with ĝ = 0.5, √v̂ = 0.5 at the first step
    let hand = 0.998_990_000_02;
    check((w[0] - hand).abs() <= 1e-9, format!("w' = {:.12} (hand {hand:.12})", w[0]))
}

fn statistics_oracles() -> Outcome {
    let gof = chi2_gof(45, 55).map_err(|e| e.to_string())?;
    let ind = chi2_independence([[30, 10], [10, 30]]).map_err(|e| e.to_string())?;
    let x: Vec<f64> = (1..=20).map(f64::from).collect();
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    let rho = spearman(&x, &rev).map_err(|e| e.to_string())?.coefficient;
    use Status::*;
    let kappa = cohens_kappa(&[M, M, O, O], &[M, O, M, O]).map_err(|e| e.to_string())?.kappa;
    let ok = (gof.statistic - 1.0).abs() <= 1e-3
        && (gof.p_value - 0.3173).abs() <= 1e-3
        && (ind.statistic - 20.0).abs() <= 1e-3
        && (rho + 1.0).abs() <= 1e-3
        && kappa == 0.0;
    check(
        ok,
        format!(
            "chi2(45,55)={:.4} p={:.4}; chi2 2x2={:.4}; spearman(x,rev x)={rho:.4}; kappa={kappa}",
            gof.statistic, gof.p_value, ind.statistic
        ),
    )
}

fn probe_free_signal() -> Outcome {
    let start = Instant::now();
    let mut props = Vec::new();
    for alpha in [0.2, 1.0] {
        let corpus = synth_corpus(&SynthCorpusConfig { n_graphs: 1000, dim: 64, alpha, max_triples: 4, seed: 11 })
            .map_err(|e| e.to_string())?;
        let pooled = corpus.pooled().map_err(|e| e.to_string())?;
        let tag = corpus.graphs[0].base.encoder_tag.clone();
        let cases = build_cases(&corpus.records, &corpus.annotations, Target::Omitted, &tag, &pooled, Pooling::Dimension)
            .map_err(|e| e.to_string())?;
        let report = proportion_probe(&cases, &Subset::ALL, Target::Omitted).map_err(|e| e.to_string())?;
        props.push(report.rows.last().ok_or("no rows")?.proportion);
    }
    let elapsed = start.elapsed();
    check(
        props[0] > 0.9 && (0.45..=0.55).contains(&props[1]) && elapsed < Duration::from_secs(60),
        format!("alpha=0.2 -> {:.3}, alpha=1.0 -> {:.3}; {:.2}s", props[0], props[1], elapsed.as_secs_f64()),
    )
}

fn parametric_probe() -> Outcome {
    let start = Instant::now();
    let corpus = synth_corpus(&SynthCorpusConfig { n_graphs: 1000, dim: 64, alpha: 0.2, max_triples: 4, seed: 12 })
        .map_err(|e| e.to_string())?;
    let pooled = corpus.pooled().map_err(|e| e.to_string())?;
    let pc = ProbeCorpus {
        records: &corpus.records,
        annotations: &corpus.annotations,
        bundles: &pooled,
        encoder_tag: &corpus.graphs[0].base.encoder_tag,
    };
    let (assign, _) = split_dataset(&corpus.annotations, Source::Manual, 5).map_err(|e| e.to_string())?;
    let data = |split| -> Result<Dataset, String> {
        let ex = pc
            .build_examples(Flavor::ManualOD, Some((&assign, split)), FeatureMode::Concat)
            .map_err(|e| e.to_string())?;
        Dataset::from_examples(&ex).map_err(|e| e.to_string())
    };
    let (train, dev, test) = (data(Split::Train)?, data(Split::Dev)?, data(Split::Test)?);
    let cfg = MlpConfig { layers: 2, hidden_size: 100, batch_size: 32, learning_rate: 0.01, ..Default::default() };
    let (_, report) = train_and_test(&cfg, &train, &dev, &test).map_err(|e| e.to_string())?;
    let probe = report.test.ok_or("no test metrics")?;
    let control = control_random_labels(&cfg, &train, &dev, &test, &probe, 99).map_err(|e| e.to_string())?;
    let c_bacc = control.control.balanced_accuracy.ok_or("control B.Acc undefined")?;
    let sel = control.selectivity.ok_or("selectivity undefined")?;
    let elapsed = start.elapsed();
    check(
        probe.f1_class0 >= 0.95 && (0.45..=0.55).contains(&c_bacc) && sel >= 0.4 && elapsed < Duration::from_secs(300),
        format!(
            "N2 test F1(0)={:.3}, control B.Acc={c_bacc:.3}, selectivity={sel:.3}; {} test examples; {:.1}s",
            probe.f1_class0,
            test.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn iou_fixture() -> Outcome {
    let entities = ["A", "B", "C", "D"];
    // (omitted under greedy, omitted under beam) per text
    let texts: [(&str, &str); 10] = [
        ("A", "A"),
        ("AB", "A"),
        ("ABC", "C"),
        ("", "A"),
        ("A", "B"),
        ("AB", "BC"),
        ("", ""),
        ("ABCD", "ABC"),
        ("A", "ABCD"),
        ("AB", "AB"),
    ];
    let record = |i: usize, decoding: Decoding, omitted: &str| AnnotationRecord {
        graph_id: format!("t{i}"),
        permutation_index: 0,
        decoding,
        entities: entities
            .iter()
            .map(|e| EntityStatus {
                surface: e.to_string(),
                status: if omitted.contains(e) { Status::O } else { Status::M },
                source: Source::Auto,
            })
            .collect(),
    };
    let mut anns = Vec::new();
    for (i, (g, b)) in texts.iter().enumerate() {
        anns.push(record(i, Decoding::Greedy, g));
        anns.push(record(i, Decoding::Beam, b));
    }
    let report = &decoding_iou(&anns, Source::Auto, Status::O, &[(Decoding::Greedy, Decoding::Beam)])[0];
    // hand-computed: 1, 1/2, 1/3, 0, 0, 1/3, (excluded), 3/4, 1/4, 1
    let mean = 25.0 / 54.0;
    let median = 1.0 / 3.0;
    let got_mean = report.mean.ok_or("no mean")?;
    let got_median = report.median.ok_or("no median")?;
    check(
        (got_mean - mean).abs() < 1e-12 && (got_median - median).abs() < 1e-12 && report.excluded_empty == 1,
        format!(
            "mean {got_mean:.6} (hand 25/54), median {got_median:.6} (hand 1/3), excluded {}",
            report.excluded_empty
        ),
    )
}

fn logistic_regression() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 500;
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 != 0)).collect();
    let x = Array2::from_shape_fn((n, 2), |(i, j)| {
        let noise = rng.random_range(-1.0..1.0);
        match (j, labels[i]) {
            (0, 1) => 2.0 + noise,
            (0, _) => -2.0 + noise,
            _ => 4.0 * noise,
        }
    });
    let names = vec!["signal".to_string(), "noise".to_string()];
    let cfg = LogRegConfig::default();
    let report = train_logreg_numeric(&x, &labels, &names, &cfg).map_err(|e| e.to_string())?;
    let max_iter = report.runs.iter().map(|r| r.model.iterations).max().unwrap_or(0);
    check(
        report.mean_test_f1_class0 >= 0.99 && max_iter <= 10_000,
        format!("mean test F1(0) {:.4} over {} seeds, ≤{max_iter} iterations", report.mean_test_f1_class0, report.runs.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("format round trip", format_round_trip),
        ("pooling oracle", pooling_oracle),
        ("gradient check", gradient_check),
        ("optimizer oracle", optimizer_oracle),
        ("statistics oracles", statistics_oracles),
        ("parameter-free probe signal response", probe_free_signal),
        ("parametric probe and selectivity", parametric_probe),
        ("decoding IoU fixture", iou_fixture),
        ("logistic regression on separable data", logistic_regression),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
