use super::*;
use crate::ingest::SplitPart;
use crate::ingest::{virtual_center, CoordKind, DatasetOptions, Location, UserTrajectory, VisitRecord, WindowSpec};
use crate::poi::{PoiCatalog, PoiProfile};

const T0: i64 = 1_704_067_200;

/// Four locations on a 2x2 virtual grid, two users cycling through them.
fn fixture() -> CityDataset {
    let catalog = PoiCatalog::xian_chengdu();
    let locations = (0..4u32)
        .map(|i| {
            let (r, c) = (i as i64 / 2, i as i64 % 2);
            let mut poi = PoiProfile::zeros(catalog.len());
            poi.freq[i as usize % 5] = 1.0 + i as f64;
            poi.freq[(i as usize + 2) % 5] = 2.0;
            Location { id: 10 + i, center: virtual_center(2, 2, 500.0, r, c), grid_row: r, grid_col: c, poi }
        })
        .collect();
    let users = (0..2)
        .map(|u| UserTrajectory {
            user_id: format!("u{u}"),
            visits: (0..60)
                .map(|k| {
                    let loc = 10 + ((k + u) % 4) as u32;
                    VisitRecord::from_stay(loc, T0 + k as i64 * 3 * 3600 + u as i64 * 600, 30.0 + (k % 5) as f64 * 20.0)
                })
                .collect(),
        })
        .collect();
    let options = DatasetOptions { window: WindowSpec { history_len: 4, current_len: 2, stride: 1 }, ..Default::default() };
    CityDataset::assemble("fixture", CoordKind::Virtual, locations, catalog, users, options).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        history_len: 4,
        current_len: 2,
        prompt_text: "predict the next place from earlier and recent visits".into(),
        features: FeatureConfig { d_t: 4, d_d: 4, d_dur: 2, d_xy: 4, ..Default::default() },
        backbone: BackboneConfig { d_model: 16, heads: 2, d_ff: 32, max_seq: 32, ..Default::default() },
        poi: PoiConfig { desc_len: 8, ..Default::default() },
        ..Default::default()
    }
}

fn model(ds: &CityDataset, cfg: ModelConfig, seed: u64) -> ModelState {
    ModelState::new(cfg, seed, ds.norm_stats, ds.dur_bounds).unwrap()
}

fn set(state: &mut ModelState, name: &str, t: Tensor) {
    let id = state.store.find(name).unwrap_or_else(|| panic!("no tensor {name}"));
    assert_eq!(state.store.value(id).shape(), t.shape(), "{name}");
    *state.store.value_mut(id) = t;
}

/// One layer, one head, width 2: identity projections, zero feed-forward,
/// zero positions. `wq` is supplied so the scores can be flattened.
fn toy_backbone(wq: Tensor) -> ModelState {
    let cfg = ModelConfig {
        history_len: 2,
        current_len: 1,
        use_prompt: false,
        features: FeatureConfig { d_t: 1, d_d: 1, d_dur: 1, d_xy: 1, ..Default::default() },
        backbone: BackboneConfig { layers: 1, heads: 1, d_model: 2, d_ff: 2, max_seq: 8, ..Default::default() },
        ..Default::default()
    };
    let stats = NormStats { mean_x: 0.0, mean_y: 0.0, std_x: 1.0, std_y: 1.0 };
    let mut s = ModelState::skeleton(cfg, 0, stats, DurBounds { min: 0.0, max: 1.0 }).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    set(&mut s, "pos", Tensor::zeros(8, 2));
    set(&mut s, "blk0.attn.q.w", wq);
    for n in ["k", "v", "o"] {
        set(&mut s, &format!("blk0.attn.{n}.w"), eye.clone());
    }
    set(&mut s, "blk0.ff.l1.w", Tensor::zeros(2, 2));
    set(&mut s, "blk0.ff.l2.w", Tensor::zeros(2, 2));
    s
}

fn ln(v: [f64; 2]) -> [f64; 2] {
    let m = (v[0] + v[1]) / 2.0;
    let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2)) / 2.0;
    let s = (var + 1e-5).sqrt();
    [(v[0] - m) / s, (v[1] - m) / s]
}

#[test]
fn single_row_golden() {
    let s = toy_backbone(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let out = s.forward(&Tensor::from_rows(&[vec![1.0, -1.0]])).unwrap();
    // one key: attention returns the value row, x1 = x + ln(x)
    let a = 1.0 / (1.0f64 + 1e-5).sqrt();
    let x1 = [1.0 + a, -1.0 - a];
    let want = ln(x1);
    assert!((out[0] - want[0]).abs() < 1e-12 && (out[1] - want[1]).abs() < 1e-12, "{out:?}");
    assert!((want[0] - (1.0 + a) / ((1.0 + a) * (1.0 + a) + 1e-5).sqrt()).abs() < 1e-15);
}

#[test]
fn equal_scores_average_values() {
    // zero queries make every score equal, so the last row sees the plain
    // mean of its causal values
    let s = toy_backbone(Tensor::zeros(2, 2));
    let a = [2.0, 1.0];
    let b = [-0.5, 3.0];
    let out = s.forward(&Tensor::from_rows(&[a.to_vec(), b.to_vec(), b.to_vec()])).unwrap();
    let (la, lb) = (ln(a), ln(b));
    let avg = [(la[0] + 2.0 * lb[0]) / 3.0, (la[1] + 2.0 * lb[1]) / 3.0];
    let want = ln([b[0] + avg[0], b[1] + avg[1]]);
    assert!((out[0] - want[0]).abs() < 1e-12 && (out[1] - want[1]).abs() < 1e-12);
}

#[test]
fn order_matters() {
    let ds = fixture();
    let s = model(&ds, small_config(), 1);
    let x = crate::nn::layers::gaussian(&mut ChaCha8Rng::seed_from_u64(2), 5, 16, 1.0);
    let mut y = x.clone();
    y.row_mut(1).copy_from_slice(x.row(3));
    y.row_mut(3).copy_from_slice(x.row(1));
    assert_ne!(s.forward(&x).unwrap(), s.forward(&y).unwrap());
}

#[test]
fn assemble_rows() {
    let p = Tensor::from_rows(&[vec![1.0, 2.0]]);
    let h = Tensor::from_rows(&[vec![3.0, 4.0]]);
    let c = Tensor::from_rows(&[vec![5.0, 6.0]]);
    let all = assemble_input(&p, &h, &c, 8).unwrap();
    assert_eq!(all, Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
    let none = assemble_input(&Tensor::zeros(0, 2), &h, &c, 8).unwrap();
    assert_eq!(none, Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
    assert!(matches!(assemble_input(&p, &h, &c, 2), Err(ModelError::SeqTooLong { len: 3, max: 2 })));
}

#[test]
fn batched_prefix_path_matches_full_sequence() {
    let ds = fixture();
    for branches in [Branches::Both, Branches::HistoryOnly, Branches::CurrentOnly] {
        for poi_mode in [PoiMode::Semantic, PoiMode::Linear] {
            let cfg = ModelConfig { branches, poi_mode, ..small_config() };
            let s = model(&ds, cfg, 3);
            let view = CityView::native(&ds, &s.config.poi);
            let pairs: Vec<&TrajectoryPair> = ds.pairs.iter().take(3).collect();
            let batch = view.prepare(&s, &pairs).unwrap();
            let mut g = Graph::new(&s.store);
            let v = s.encode(&mut g, &view, &batch).unwrap();
            let v = g.value(v).clone();
            for (i, p) in pairs.iter().enumerate() {
                let (pre, his, cur) = s.embed_pair(&view, p).unwrap();
                assert_eq!(his.rows(), s.config.history_rows());
                assert_eq!(cur.rows(), s.config.current_rows());
                let seq = assemble_input(&pre, &his, &cur, s.config.backbone.max_seq).unwrap();
                assert_eq!(seq.rows(), s.config.seq_rows());
                let full = s.forward(&seq).unwrap();
                for (a, b) in full.iter().zip(v.row(i)) {
                    assert!((a - b).abs() < 1e-10, "{branches:?} {poi_mode:?}");
                }
            }
        }
    }
}

#[test]
fn history_only_drops_current_rows() {
    let cfg = ModelConfig { branches: Branches::HistoryOnly, ..small_config() };
    assert_eq!(cfg.seq_rows(), cfg.prompt().len() + 4);
    let cfg = ModelConfig { use_prompt: false, ..cfg };
    assert_eq!(cfg.seq_rows(), 4);
}

#[test]
fn zero_head_predicts_mean() {
    let ds = fixture();
    let mut s = model(&ds, small_config(), 4);
    let view = CityView::native(&ds, &s.config.poi);
    let p = &ds.pairs[0];
    let a = s.predict_coords(&view, p).unwrap();
    assert_eq!(a, s.predict_coords(&view, p).unwrap());
    set(&mut s, "head.l2.w", Tensor::zeros(16, 2));
    set(&mut s, "head.l2.b", Tensor::zeros(1, 2));
    let m = s.predict_coords(&view, p).unwrap();
    assert_eq!(m, MercatorPoint::new(ds.norm_stats.mean_x, ds.norm_stats.mean_y));
}

#[test]
fn euclidean_loss_values() {
    let a = MercatorPoint::new(10.0, 20.0);
    assert_eq!(loss(a, a), 0.0);
    assert_eq!(loss(MercatorPoint::new(13.0, 24.0), a), 5.0);
}

#[test]
fn freeze_partition() {
    let ds = fixture();
    let s = model(&ds, small_config(), 5);
    let mut frozen = 0;
    for e in s.store.entries() {
        assert_eq!(e.trainable, !is_core_param(&e.name), "{}", e.name);
        frozen += !e.trainable as usize;
    }
    assert_eq!(frozen, 1 + 2 * (8 + 4));
    assert_eq!(s.store.trainable_ids().len() + s.store.frozen_ids().len(), s.store.len());
    let cfg = ModelConfig { backbone: BackboneConfig { freeze_mode: FreezeMode::FullFinetune, ..small_config().backbone }, ..small_config() };
    let s = model(&ds, cfg, 5);
    assert!(s.store.frozen_ids().is_empty());
}

#[test]
fn non_finite_activation_names_layer() {
    let ds = fixture();
    let mut s = model(&ds, small_config(), 6);
    let id = s.store.find("blk1.ff.l1.b").unwrap();
    s.store.value_mut(id).data_mut()[0] = f64::NAN;
    let view = CityView::native(&ds, &s.config.poi);
    assert!(matches!(s.predict_coords(&view, &ds.pairs[0]), Err(ModelError::NonFinite { layer: 1 })));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = fixture();
    let mut s = model(&ds, small_config(), 7);
    let before = s.store.full_digest();
    let view = CityView::native(&ds, &s.config.poi);
    let sched = Schedule { lr: 0.0, max_epochs: 3, batch_size: 16, ..Default::default() };
    let out = train(&mut s, &[view], &sched, 1).unwrap();
    assert_eq!(s.store.full_digest(), before);
    let v0 = out.epochs[0].val_loss;
    assert!(out.epochs.iter().all(|e| e.val_loss == v0));
}

#[test]
fn frozen_tensors_survive_training() {
    let ds = fixture();
    let mut s = model(&ds, small_config(), 8);
    let frozen = s.store.frozen_digest();
    let all = s.store.full_digest();
    let view = CityView::native(&ds, &s.config.poi);
    let sched = Schedule { max_steps: 20, batch_size: 8, ..Default::default() };
    let out = train(&mut s, &[view], &sched, 2).unwrap();
    assert_eq!(out.steps, 20);
    assert_eq!(s.store.frozen_digest(), frozen);
    assert_ne!(s.store.full_digest(), all);
}

#[test]
fn fifty_steps_halve_training_loss() {
    let ds = fixture();
    let mut s = model(&ds, small_config(), 11);
    let view = CityView::native(&ds, &s.config.poi);
    let before = train::mean_loss(&s, std::slice::from_ref(&view), SplitPart::Train, 256).unwrap();
    let sched = Schedule { lr: 1e-2, max_steps: 50, batch_size: 8, max_epochs: 1000, patience: 1000, ..Default::default() };
    let out = train(&mut s, std::slice::from_ref(&view), &sched, 4).unwrap();
    assert_eq!(out.steps, 50);
    let after = train::mean_loss(&s, &[view], SplitPart::Train, 256).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn training_is_deterministic() {
    let ds = fixture();
    let run = || {
        let mut s = model(&ds, small_config(), 9);
        let view = CityView::native(&ds, &s.config.poi);
        let sched = Schedule { max_steps: 10, batch_size: 8, ..Default::default() };
        let out = train(&mut s, &[view], &sched, 3).unwrap();
        (out, s.store.full_digest())
    };
    assert_eq!(run(), run());
}

#[test]
fn gradient_check_on_fixture() {
    let ds = fixture();
    for poi_mode in [PoiMode::Semantic, PoiMode::Linear] {
        let mut s = model(&ds, ModelConfig { poi_mode, ..small_config() }, 10);
        let view = CityView::native(&ds, &s.config.poi.clone());
        let pairs: Vec<&TrajectoryPair> = ds.pairs.iter().take(2).collect();
        let report = grad_check(&mut s, &view, &pairs, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{:?} max {}", report.failures, report.max_rel_err);
        assert!(report.frozen_tensors > 0);
        for e in report.entries.iter().filter(|e| e.param == "head.l2.b") {
            assert!(e.rel_err < 1e-6, "{e:?}");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let ds = fixture();
    let mut s = model(&ds, small_config(), 11);
    let bytes = checkpoint::encode_checkpoint(&s, "locs");
    assert_eq!(&bytes[..5], CHECKPOINT_MAGIC);
    let ck = checkpoint::decode_checkpoint(&bytes, Some(&s.config.digest()), false).unwrap();
    s.quantize_f32();
    assert_eq!(ck.state.store.full_digest(), s.store.full_digest());
    assert_eq!(ck.state.store.frozen_digest(), s.store.frozen_digest());
    assert_eq!(ck.state.norm_stats, s.norm_stats);
    assert_eq!(ck.state.prompt, s.prompt);
    assert!(ck.check_locations("locs", false).is_ok());
    assert!(matches!(ck.check_locations("other", false), Err(CheckpointError::LocationMismatch { .. })));
    assert!(ck.check_locations("other", true).is_ok());
    assert!(matches!(
        checkpoint::decode_checkpoint(&bytes, Some("deadbeef"), false),
        Err(CheckpointError::DigestMismatch { .. })
    ));
    assert!(checkpoint::decode_checkpoint(&bytes, Some("deadbeef"), true).is_ok());
    assert!(matches!(checkpoint::decode_checkpoint(b"NXLL0...", None, false), Err(CheckpointError::BadMagic)));
    assert!(checkpoint::decode_checkpoint(&bytes[..bytes.len() - 3], None, false).is_err());
}

#[test]
fn synthetic_pretrain_is_seeded() {
    let ds = fixture();
    let cfg = ModelConfig {
        backbone: BackboneConfig { init_mode: InitMode::SyntheticPretrain, pretrain_steps: 5, ..small_config().backbone },
        ..small_config()
    };
    let a = model(&ds, cfg.clone(), 12);
    let b = model(&ds, cfg, 12);
    let plain = model(&ds, small_config(), 12);
    assert_eq!(a.store.full_digest(), b.store.full_digest());
    assert_ne!(a.store.frozen_digest(), plain.store.frozen_digest());
    assert_eq!(a.store.frozen_ids(), plain.store.frozen_ids());
}

#[test]
fn config_validation() {
    let mut cfg = small_config();
    cfg.backbone.heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = small_config();
    cfg.backbone.max_seq = 5;
    assert!(matches!(cfg.validate(), Err(ModelError::SeqTooLong { .. })));
    let cfg = small_config();
    assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(ModelConfig::from_text(&format!("{}\nbogus = 1\n", cfg.to_text())).is_err());
}
