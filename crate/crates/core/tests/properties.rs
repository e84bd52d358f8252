use mmcl_core::distributions::{marginals, normalize_cooccurrence, text_induced, JointDistribution, LabelAssignment};
use mmcl_core::eval::{labeling_error, surrogate_labeling_error};
use mmcl_core::experiments::resample::one_hot_teacher;
use mmcl_core::losses::{
    amf_loss_of_encoders, empirical_scl, equivalence_constant, sample_batch, scl_loss, EncoderTable, Side,
};
use mmcl_core::spectral::{decompose, optimal_encoders, OptimalEncoderParams};
use mmcl_core::train::{apply_strategy, ResampleConfig, Strategy as Resampling};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn joint() -> impl Strategy<Value = JointDistribution> {
    (2usize..8, 2usize..8).prop_flat_map(|(r, c)| {
        prop::collection::vec(0.01f64..1.0, r * c)
            .prop_map(move |w| JointDistribution::from_weights(DMatrix::from_row_slice(r, c, &w)).unwrap())
    })
}

fn table(rows: usize, k: usize, side: Side) -> impl Strategy<Value = EncoderTable> {
    prop::collection::vec(-2.0f64..2.0, rows * k)
        .prop_map(move |v| EncoderTable::new(DMatrix::from_row_slice(rows, k, &v), side).unwrap())
}

fn instance() -> impl Strategy<Value = (JointDistribution, EncoderTable, EncoderTable)> {
    (joint(), 1usize..4).prop_flat_map(|(p, k)| {
        let (r, c) = (p.n_visual(), p.n_language());
        (Just(p), table(r, k, Side::Visual), table(c, k, Side::Language))
    })
}

proptest! {
    #[test]
    fn amf_minus_scl_is_the_target_energy((p, fv, fl) in instance()) {
        let norm = normalize_cooccurrence(&p).unwrap();
        let scl = scl_loss(&fv, &fl, &p).unwrap();
        let amf = amf_loss_of_encoders(&fv, &fl, &norm).unwrap();
        let c = equivalence_constant(&norm);
        prop_assert!((amf - scl - c).abs() <= 1e-9 * (1.0 + scl.abs()));
    }

    #[test]
    fn closed_form_optimum_lower_bounds_random_encoders((p, fv, fl) in instance()) {
        let k = fv.dim();
        let dec = decompose(&normalize_cooccurrence(&p).unwrap()).unwrap();
        prop_assume!(k <= dec.rank_bound());
        let (a, b) = optimal_encoders(&p, &OptimalEncoderParams::identity(k)).unwrap();
        let best = scl_loss(&a, &b, &p).unwrap();
        prop_assert!((best + dec.head_energy(k)).abs() <= 1e-9);
        prop_assert!(best <= scl_loss(&fv, &fl, &p).unwrap() + 1e-9);
    }

    #[test]
    fn labeling_error_bounds_half_the_surrogate(
        p in joint(),
        seed in any::<u64>(),
    ) {
        let classes = 2;
        let yv: Vec<usize> = (0..p.n_visual()).map(|i| ((seed >> (i % 64)) & 1) as usize).collect();
        let yl: Vec<usize> = (0..p.n_language()).map(|j| ((seed >> ((j + 17) % 64)) & 1) as usize).collect();
        prop_assume!(yv.contains(&0) && yv.contains(&1));
        let labels = LabelAssignment::new(yv, yl, classes).unwrap();
        let alpha = labeling_error(&p, &labels).unwrap();
        let alpha_t = surrogate_labeling_error(&text_induced(&p).unwrap(), labels.visual()).unwrap();
        prop_assert!(alpha >= alpha_t / 2.0 - 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&alpha));
    }

    #[test]
    fn text_induced_is_symmetric_with_visual_marginal(p in joint()) {
        let t = text_induced(&p).unwrap();
        let m = t.matrix();
        prop_assert!((m - m.transpose()).amax() <= 1e-15);
        let (pv, _) = marginals(&p);
        prop_assert!((t.marginal() - pv).amax() <= 1e-12);
    }

    #[test]
    fn zero_encoders_have_zero_batch_loss(p in joint(), triples in 1usize..6, seed in any::<u64>()) {
        let batch = sample_batch(&p, 3 * triples, seed).unwrap();
        let fv = EncoderTable::zeros(p.n_visual(), 2, Side::Visual);
        let fl = EncoderTable::zeros(p.n_language(), 2, Side::Language);
        prop_assert_eq!(empirical_scl(&fv, &fl, &batch).unwrap(), 0.0);
    }

    #[test]
    fn strategies_keep_counts_in_bounds(
        n in 4usize..12,
        triples in 1usize..12,
        ratio in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let w = DMatrix::from_fn(n, n, |i, j| 1.0 + ((i * 7 + j * 3) % 5) as f64);
        let p = JointDistribution::from_weights(&w + w.transpose()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let teacher = one_hot_teacher(&labels, 3);
        let batch = sample_batch(&p, 3 * triples, seed).unwrap();
        for s in Resampling::ALL {
            let cfg = ResampleConfig { strategy: s, ratio, mix_weight: 1.0 };
            let rb = apply_strategy(&batch, &teacher, &cfg).unwrap();
            let m = batch.len();
            let drop = |count: usize| (ratio * count as f64).floor() as usize;
            prop_assert_eq!(rb.triples, m);
            match s {
                Resampling::AddNewPositive => prop_assert!(rb.new_positives.len() <= drop(m)),
                Resampling::DropFalsePositive => prop_assert_eq!(rb.positives.len(), m - drop(m)),
                Resampling::DropFalseNegative | Resampling::DropEasyNegative => {
                    prop_assert_eq!(rb.negatives.len(), 2 * m - drop(2 * m))
                }
            }
        }
    }
}
