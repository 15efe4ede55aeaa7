use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pcl::config::RunConfig;
use pcl::corpus::{assemble_input, load_dataset, write_dataset, Example, LabelCounts, CLS, NUM_SPECIAL, SEP};
use pcl::losses::{
    label_smoothing_loss, pcl_loss_with_prediction, propensity_terms, Condition, ConditionTable, CorrectionMode, PclConfig,
};
use pcl::pretrain::{apply_corruption, select_mask_spans, WordSpan};
use pcl::trainer::MetricsReport;

fn spans_from(lens: &[(usize, bool)]) -> Vec<WordSpan> {
    let mut pos = 0;
    lens.iter()
        .map(|&(len, k)| {
            let s = WordSpan { start: pos, end: pos + len, is_knowledge: k, priority: 1.0 };
            pos += len;
            s
        })
        .collect()
}

proptest! {
    #[test]
    fn jsonl_round_trip(rows in prop::collection::vec(("[a-z]\\PC{0,20}", "\\PC{0,40}[0-9]", 0usize..3), 1..30)) {
        let examples: Vec<Example> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (a, b, y))| Example::new(i as u64, a, b, y).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &examples).unwrap();
        prop_assert_eq!(load_dataset(&p).unwrap(), examples);
    }

    #[test]
    fn assembly_respects_budget(n1 in 0usize..60, n2 in 1usize..60, max_len in 5usize..80) {
        let a: Vec<usize> = (0..n1).map(|i| NUM_SPECIAL + i).collect();
        let b: Vec<usize> = (0..n2).map(|i| NUM_SPECIAL + 100 + i).collect();
        let seq = assemble_input(&a, &b, max_len).unwrap();
        let (m1, m2) = (seq.s1_span.len(), seq.s2_span.len());
        prop_assert!(seq.length <= max_len);
        prop_assert_eq!(seq.length, m1 + m2 + 3);
        prop_assert!(m1 <= n1 && m2 <= n2);
        prop_assert_eq!(seq.ids[0], CLS);
        prop_assert_eq!(seq.ids[m1 + 1], SEP);
        prop_assert_eq!(seq.ids[seq.length - 1], SEP);
        prop_assert_eq!(&seq.ids[1..m1 + 1], &a[..m1]);
        prop_assert_eq!(&seq.ids[m1 + 2..m1 + 2 + m2], &b[..m2]);
        if n1 + n2 + 3 <= max_len {
            prop_assert_eq!((m1, m2), (n1, n2));
        }
    }

    #[test]
    fn config_render_round_trips(
        seed in any::<u64>(),
        epochs in 1usize..50,
        lr in 1e-6f64..1.0,
        eps in 0.0f64..2.0,
        mult in any::<bool>(),
        dim_heads in prop::sample::select(vec![(8usize, 2usize), (16, 4), (64, 2)]),
    ) {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("train.epochs", &epochs.to_string()).unwrap();
        cfg.set("train.lr", &lr.to_string()).unwrap();
        cfg.set("loss.epsilon", &eps.to_string()).unwrap();
        cfg.set("loss.mode", if mult { "multiplicative" } else { "additive" }).unwrap();
        cfg.set("encoder.dim", &dim_heads.0.to_string()).unwrap();
        cfg.set("encoder.heads", &dim_heads.1.to_string()).unwrap();
        cfg.validate().unwrap();
        let back = RunConfig::parse_str(&cfg.render()).unwrap();
        prop_assert_eq!(back.render(), cfg.render());
        prop_assert_eq!(back.train_config(), cfg.train_config());
    }

    #[test]
    fn mask_selection_invariants(
        lens in prop::collection::vec((1usize..4, any::<bool>()), 1..40),
        rate in 0.05f64..0.5,
        boost in 1.0f64..8.0,
        seed in any::<u64>(),
    ) {
        let spans = spans_from(&lens);
        let total: usize = lens.iter().map(|l| l.0).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = select_mask_spans(&spans, rate, boost, &mut rng).unwrap();
        let unique: HashSet<usize> = picked.iter().copied().collect();
        prop_assert_eq!(unique.len(), picked.len());
        let covered: usize = picked.iter().map(|&i| spans[i].len()).sum();
        let budget = ((rate * total as f64).ceil() as usize).max(1);
        let longest = lens.iter().map(|l| l.0).max().unwrap();
        prop_assert!(covered >= budget.min(total));
        prop_assert!(covered < budget + longest);
    }

    #[test]
    fn corruption_restores_and_never_splits(
        lens in prop::collection::vec((1usize..4, any::<bool>()), 1..30),
        seed in any::<u64>(),
        epoch in 0u64..5,
    ) {
        let spans = spans_from(&lens);
        let total: usize = lens.iter().map(|l| l.0).sum();
        let shifted: Vec<WordSpan> = spans.iter().map(|s| WordSpan { start: s.start + 1, end: s.end + 1, ..*s }).collect();
        let mut ids = vec![CLS];
        ids.extend((0..total).map(|i| NUM_SPECIAL + i % 50));
        ids.push(SEP);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = apply_corruption(&ids, &shifted, NUM_SPECIAL + 50, epoch, &mut rng).unwrap();
        prop_assert_eq!(m.restored(), ids.clone());
        prop_assert_eq!(m.epoch, epoch);
        prop_assert!(m.mask_positions.windows(2).all(|w| w[0] < w[1]));
        let masked: HashSet<usize> = m.mask_positions.iter().copied().collect();
        for s in &shifted {
            let hit = (s.start..s.end).filter(|p| masked.contains(p)).count();
            prop_assert!(hit == 0 || hit == s.len());
        }
        prop_assert_eq!(m.ids[0], CLS);
        prop_assert_eq!(*m.ids.last().unwrap(), SEP);
    }

    #[test]
    fn correction_matches_condition(
        logits in prop::array::uniform3(-8.0f64..8.0),
        y in 0usize..3,
        p in 0usize..3,
        eps in 0.0f64..1.5,
        counts in (0u64..500, 1u64..500, 1u64..500),
    ) {
        let terms = propensity_terms(&LabelCounts::new(counts.0, counts.1, counts.2), eps).unwrap();
        let ls = label_smoothing_loss(&logits, y, 0.1).unwrap();
        let add = PclConfig { epsilon: eps, ..PclConfig::default() };
        let mult = PclConfig { mode: CorrectionMode::Multiplicative, ..add.clone() };
        let a = pcl_loss_with_prediction(&logits, y, p, &terms, &add).unwrap();
        if terms.pcl_minus >= 1.0 {
            prop_assert!(pcl_loss_with_prediction(&logits, y, p, &terms, &mult).is_err());
            return Ok(());
        }
        let m = pcl_loss_with_prediction(&logits, y, p, &terms, &mult).unwrap();
        let (shift, factor) = match ConditionTable::default().get(y, p) {
            Condition::C1 => (-terms.pcl_minus, 1.0 - terms.pcl_minus),
            Condition::C2 => (terms.pcl_plus, 1.0 + terms.pcl_plus),
            Condition::C3 => (0.0, 1.0),
        };
        prop_assert!((a.corrected_value - (ls.value + shift)).abs() < 1e-12);
        prop_assert_eq!(a.grad_logits, ls.grad);
        prop_assert!((m.corrected_value - ls.value * factor).abs() < 1e-12);
        for k in 0..3 {
            prop_assert!((m.grad_logits[k] - ls.grad[k] * factor).abs() < 1e-12);
        }
        prop_assert!(a.ls_value == ls.value && m.ls_value == ls.value);
    }

    #[test]
    fn metrics_are_bounded(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200)) {
        let (gold, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = MetricsReport::from_pairs(&gold, &pred).unwrap();
        prop_assert!((0.0..=100.0).contains(&m.macro_f1));
        prop_assert!((0.0..=100.0).contains(&m.accuracy));
        prop_assert_eq!(m.confusion.total(), gold.len() as u64);
        if gold == pred {
            prop_assert!((m.accuracy - 100.0).abs() < 1e-12);
        }
    }
}
