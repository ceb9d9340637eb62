use mmrec_core::backbone::{total_loss, LossTerms, LossWeights, Model};
use mmrec_core::checkpoint::{load_model, save_checkpoint};
use mmrec_core::cluster::adjusted_rand_index;
use mmrec_core::codebook::assign_hard;
use mmrec_core::config::RunConfig;
use mmrec_core::dataset::{generate_synthetic, SyntheticSpec};
use mmrec_core::pipeline::{self, run};

fn small(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "data.synthetic.num_users=80",
        "data.synthetic.num_items=60",
        "data.synthetic.num_confounders=3",
        "data.synthetic.interactions_per_user=10",
        "data.synthetic.deconfounded_per_user=4",
        "data.synthetic.visual_dim=12",
        "data.synthetic.textual_dim=10",
        "model.dim=16",
        "model.codebook_size=3",
        "model.diffusion_steps=8",
        "model.knn_k=5",
        "train.epochs=4",
        "train.batch_size=256",
        "train.warmup_epochs=2",
        "train.diffusion_batch=60",
        "train.nce_batch=32",
        "train.lr=0.01",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load_with_overrides(None, &o).unwrap()
}

#[test]
fn same_seed_same_report() {
    let cfg = small(&[]);
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.outcome.epochs, b.outcome.epochs);
}

#[test]
fn all_ablations_at_once_reduce_to_the_backbone() {
    let cfg = small(&[
        "ablation.disable_backdoor=true",
        "ablation.disable_frontdoor=true",
        "ablation.disable_dcd=true",
    ]);
    let r = run(&cfg).unwrap();
    let m = &r.outcome.model;
    assert!(m.confounder.is_none());
    let mut names: Vec<&str> = m.params.names().map(|s| s.as_str()).collect();
    names.sort();
    assert_eq!(names, ["embedding", "proj_t", "proj_v"]);
    assert!(r.outcome.epochs.iter().all(|e| e.loss_dm == 0.0 && e.loss_vq == 0.0 && e.loss_nce == 0.0));
}

#[test]
fn disabling_one_module_keeps_other_streams() {
    // the embedding table is drawn from its own stream, so it is identical
    // at initialization whatever else is enabled
    let full = small(&[]);
    let ablated = small(&["ablation.disable_frontdoor=true", "ablation.disable_backdoor=true"]);
    let ds = generate_synthetic(&full.data.synthetic).unwrap();
    let prep = pipeline::prepare(&full, ds).unwrap();
    let a = Model::new(&full, &prep.inputs).unwrap();
    let b = Model::new(&ablated, &prep.inputs).unwrap();
    assert_eq!(a.params.get("embedding"), b.params.get("embedding"));
    assert_eq!(a.params.get("proj_v"), b.params.get("proj_v"));
}

#[test]
fn epoch_losses_recompose() {
    let r = run(&small(&[])).unwrap();
    for e in &r.outcome.epochs {
        assert!(e.loss_total.is_finite() && e.loss_bpr > 0.0 && e.loss_dm > 0.0 && e.loss_nce > 0.0);
        assert!(e.loss_total >= e.loss_bpr);
    }
}

#[test]
fn breakdown_total_is_weighted_sum() {
    let tape = mmrec_core::autograd::Tape::new();
    let s = |v: f64| tape.scalar(v);
    let terms = LossTerms {
        bpr: s(0.7),
        diffusion: Some(s(2.0)),
        vq: Some(s(0.5)),
        infonce: Some(s(3.0)),
        l2: s(10.0),
    };
    let w = LossWeights {
        dm: 0.1,
        vq: 0.2,
        nce: 0.05,
        reg: 1e-3,
    };
    let (loss, b) = total_loss(&terms, w).unwrap();
    assert!((loss.item() - b.total).abs() < 1e-15);
    assert!((b.recompose() - (0.7 + 0.2 + 0.1 + 0.15 + 0.01)).abs() < 1e-12);
    let zero = LossWeights {
        dm: 0.0,
        vq: 0.0,
        nce: 0.0,
        reg: 0.0,
    };
    assert_eq!(total_loss(&terms, zero).unwrap().1.total, 0.7);
    let bad = LossTerms {
        vq: Some(s(f64::NAN)),
        ..terms
    };
    let Err(err) = total_loss(&bad, w) else { panic!("non-finite term accepted") };
    assert!(err.to_string().contains("vq"), "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_scores() {
    let r = run(&small(&[])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = &r.outcome.model;
    save_checkpoint(dir.path(), m, &r.prepared.inputs, r.outcome.best_epoch, r.outcome.best_val_recall20).unwrap();
    let (manifest, loaded) = load_model(dir.path(), &r.prepared.inputs).unwrap();
    assert_eq!(manifest.epoch, r.outcome.best_epoch);
    assert_eq!(manifest.config_hash, m.config.hash());
    assert_eq!(manifest.denoisers.len(), 2);
    let a = m.infer(&r.prepared.inputs).unwrap();
    let b = loaded.infer(&r.prepared.inputs).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.rho, b.rho);
    assert_eq!(pipeline::report(&loaded, &r.prepared, manifest.epoch).unwrap(), r.report);
}

/// Nearest-class-mean probe (a linear classifier) fit on even items,
/// scored on odd items.
fn probe_accuracy(x: &ndarray::Array2<f64>, labels: &[usize], classes: usize) -> f64 {
    let d = x.ncols();
    let mut means = ndarray::Array2::<f64>::zeros((classes, d));
    let mut counts = vec![0.0f64; classes];
    for i in (0..labels.len()).step_by(2) {
        let mut row = means.row_mut(labels[i]);
        row += &x.row(i);
        counts[labels[i]] += 1.0;
    }
    for c in 0..classes {
        let n = counts[c];
        means.row_mut(c).mapv_inplace(|v| v / n.max(1.0));
    }
    let test: Vec<usize> = (1..labels.len()).step_by(2).collect();
    let pred = assign_hard(&x.select(ndarray::Axis(0), &test), &means).unwrap().labels;
    let hits = test.iter().zip(&pred).filter(|(&i, &p)| labels[i] == p).count();
    hits as f64 / test.len() as f64
}

#[test]
fn features_reveal_the_stratum() {
    let ds = generate_synthetic(&SyntheticSpec::new(500, 300, 4, 0.8, 0.5, 7)).unwrap();
    let labels = ds.item_confounder.unwrap();
    assert!(probe_accuracy(&ds.visual.matrix, &labels, 4) > 0.9);
    assert!(probe_accuracy(&ds.textual.matrix, &labels, 4) > 0.9);

    let blind = generate_synthetic(&SyntheticSpec::new(50, 300, 4, 0.0, 0.5, 7)).unwrap();
    let acc = probe_accuracy(&blind.visual.matrix, &blind.item_confounder.unwrap(), 4);
    assert!(acc < 0.45, "{acc}");
}

#[test]
fn codebook_recovers_strata() {
    let cfg = small(&[
        "data.synthetic.num_users=150",
        "data.synthetic.num_items=120",
        "data.synthetic.num_confounders=4",
        "model.codebook_size=4",
    ]);
    let r = run(&cfg).unwrap();
    let m = &r.outcome.model;
    let labels = assign_hard(m.confounder.as_ref().unwrap(), m.params.get("codebook"))
        .unwrap()
        .labels;
    let ari = adjusted_rand_index(&labels, r.prepared.dataset.item_confounder.as_ref().unwrap());
    assert!(ari > 0.6, "ARI {ari}");
}
