use serkd::config::{RunConfig, StudentInit};
use serkd::data::{gen_synthetic, DataSpec, Split};
use serkd::train::{build_teacher, distill, DistillSetup, Streams};
use serkd_core::models::ParamStore;
use serkd_core::optim::{Optimizer, OptimizerSpec};
use serkd_core::rng::SeededRng;
use serkd_core::Tensor;

fn mlp_logits(p: &ParamStore, x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let flat = x.reshape(&[n, x.numel() / n]).unwrap();
    let layer = |x: &Tensor, w: &str, b: &str| {
        let (w, b) = (p.get(w).unwrap(), p.get(b).unwrap());
        let y = x.matmul(w).unwrap();
        y.add(&b.unsqueeze(0).unwrap().broadcast_to(y.shape()).unwrap())
            .unwrap()
    };
    layer(&layer(&flat, "w1", "b1").relu(), "w2", "b2")
}

fn mlp_accuracy(p: &ParamStore, split: &Split) -> f64 {
    let idx: Vec<usize> = (0..split.len()).collect();
    let (x, y) = split.batch(&idx).unwrap();
    let logits = mlp_logits(&p.with_requires_grad(false), &x);
    let k = logits.shape()[1];
    let hits = logits
        .to_vec()
        .chunks(k)
        .zip(&y)
        .filter(|(row, &label)| {
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == label
        })
        .count();
    hits as f64 / y.len() as f64
}

#[test]
fn synthetic_classes_are_separable_by_a_small_mlp() {
    let spec = DataSpec {
        train_per_class: 256,
        ..DataSpec::default()
    };
    let data = gen_synthetic(&spec, 0).unwrap();
    let d = spec.image_size * spec.image_size * 3;
    let (hidden, k) = (32, spec.classes);
    let mut rng = SeededRng::new(1);
    let mut p = ParamStore::new();
    p.insert(
        "w1",
        Tensor::leaf(
            rng.normal_vec(d * hidden, 0.0, (2.0 / d as f64).sqrt()),
            &[d, hidden],
            true,
        )
        .unwrap(),
    );
    p.insert("b1", Tensor::leaf(vec![0.0; hidden], &[hidden], true).unwrap());
    p.insert(
        "w2",
        Tensor::leaf(
            rng.normal_vec(hidden * k, 0.0, (1.0 / hidden as f64).sqrt()),
            &[hidden, k],
            true,
        )
        .unwrap(),
    );
    p.insert("b2", Tensor::leaf(vec![0.0; k], &[k], true).unwrap());

    let (epochs, batch) = (8, 64);
    let steps = epochs * data.train.len().div_ceil(batch);
    let mut opt = Optimizer::new(OptimizerSpec::default(), steps).unwrap();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let (x, y) = data.train.batch(chunk).unwrap();
            p.zero_grad();
            serkd_core::objective::loss_cls(&mlp_logits(&p, &x), &y)
                .unwrap()
                .backward()
                .unwrap();
            opt.step(&p).unwrap();
        }
    }
    let acc = mlp_accuracy(&p, &data.val);
    assert!(acc > 0.90, "baseline val accuracy {acc}");
}

#[test]
fn student_copied_from_teacher_has_zero_distillation_terms() {
    let mut cfg = RunConfig::default();
    cfg.set("data.train_per_class", "4").unwrap();
    cfg.student = cfg.teacher.clone();
    cfg.student_init = StudentInit::Teacher;
    let mut streams = Streams::new(cfg.seed);
    let teacher = build_teacher(&cfg, &mut streams.teacher_init).unwrap();
    let setup = DistillSetup::new(&cfg, &teacher, &mut streams).unwrap();
    let data = gen_synthetic(&cfg.data, cfg.seed).unwrap();
    let (x, y) = data.val.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let r = setup.objective(&x, &y).unwrap().report;
    for (name, v) in [("kd", r.kd), ("feat", r.feat), ("rd_sp", r.rd_sp), ("ra_sp", r.ra_sp)] {
        assert!(v.abs() <= 1e-12, "{name} = {v}");
    }
    assert!((r.total - r.cls).abs() <= 1e-12);
}

fn tiny(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    for (k, v) in [
        ("data.train_per_class", "8"),
        ("data.val_per_class", "4"),
        ("teacher.dim", "16"),
        ("teacher.depth", "1"),
        ("student.dim", "8"),
        ("student.depth", "1"),
        ("distill.epochs", "2"),
        ("distill.batch_size", "8"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn every_logged_step_recomposes_and_seeds_reproduce() {
    let cfg = tiny(3);
    let data = gen_synthetic(&cfg.data, cfg.seed).unwrap();
    let teacher = build_teacher(&cfg, &mut Streams::new(cfg.seed).teacher_init).unwrap();
    let (_, report, log) = distill(&cfg, &data, &teacher).unwrap();
    assert_eq!(report.steps, 8);
    assert!(report.teacher_unchanged);
    let step_lines: Vec<&str> = log.lines().filter(|l| l.starts_with("step=")).collect();
    assert_eq!(step_lines.len(), 8);
    let d = &cfg.distill;
    for line in &step_lines {
        let field = |k: &str| -> f64 {
            line.split_whitespace()
                .find_map(|kv| kv.strip_prefix(&format!("{k}=")))
                .unwrap()
                .parse()
                .unwrap()
        };
        let recomposed = field("cls")
            + d.lambda_kd * field("kd")
            + d.lambda_feat * field("feat")
            + d.lambda_rd * field("rd_sp")
            + d.lambda_ra * field("ra_sp");
        // the log keeps nine significant digits
        assert!(
            (recomposed - field("total")).abs() <= 1e-8 * field("total").abs().max(1.0),
            "{line}"
        );
    }
    let (_, again, log_again) = distill(&cfg, &data, &teacher).unwrap();
    assert_eq!(log, log_again);
    assert_eq!(report, again);

    let (_, _, other) = distill(&tiny(4), &data, &teacher).unwrap();
    assert_ne!(log, other);
}

#[test]
fn every_clustering_and_kernel_runs() {
    let data_cfg = tiny(5);
    let data = gen_synthetic(&data_cfg.data, data_cfg.seed).unwrap();
    let teacher = build_teacher(&data_cfg, &mut Streams::new(data_cfg.seed).teacher_init).unwrap();
    for (clustering, kernel) in [
        ("direct", "attention"),
        ("max-pool", "attention"),
        ("avg-pool", "attention"),
        ("superpixel", "attention"),
        ("superpixel", "rbf"),
    ] {
        let mut cfg = data_cfg.clone();
        cfg.set("distill.epochs", "1").unwrap();
        cfg.set("distill.clustering", clustering).unwrap();
        cfg.set("distill.kernel", kernel).unwrap();
        let (_, r, _) = distill(&cfg, &data, &teacher).unwrap();
        assert!(r.fin.is_finite() && r.initial.is_finite(), "{clustering}/{kernel}");
    }
}
