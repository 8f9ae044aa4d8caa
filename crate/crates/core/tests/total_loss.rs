use lps::data::MultiViewBatch;
use lps::numeric::ProbVector;
use lps::objective::{
    adaptive_margins, am_batch_loss, entropy_regularizer, pc_loss, total_loss, uc_loss, Ablation,
    ClassDistribution, Hyperparams,
};
use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const K: usize = 4;

struct Fixture {
    batch: MultiViewBatch,
    weak: Array2<f64>,
    strong: Array2<f64>,
    margins: Vec<f64>,
}

/// Ten samples: three labeled, the rest unlabeled with a mixed confidence partition.
fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 10;
    let labels: Vec<i64> = (0..b)
        .map(|i| if i < 3 { (i % 2) as i64 } else { -1 })
        .collect();
    let mut batch =
        MultiViewBatch::new(Array2::zeros((b, 1)), Array2::zeros((b, 1)), labels).unwrap();
    let confident: Vec<bool> = (0..b).map(|i| i >= 3 && i % 2 == 0).collect();
    let pseudo: Vec<Option<usize>> = (0..b).map(|i| (i >= 3).then_some(i % K)).collect();
    batch.set_partition(confident, pseudo).unwrap();
    let mut normal =
        |rows| Array2::from_shape_fn((rows, K), |_| 2.0 * rng.sample::<f64, _>(StandardNormal));
    let weak = normal(b);
    let strong = normal(b);
    let dist = ClassDistribution::new(ProbVector::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap());
    Fixture {
        batch,
        weak,
        strong,
        margins: adaptive_margins(&dist, 10.0),
    }
}

fn stack(f: &Fixture, rows: &[usize]) -> Array2<f64> {
    concatenate(
        Axis(0),
        &[
            f.weak.select(Axis(0), rows).view(),
            f.strong.select(Axis(0), rows).view(),
        ],
    )
    .unwrap()
}

/// Each optional term recomputed from the batch definition.
fn independent_terms(f: &Fixture, hp: &Hyperparams) -> (f64, f64, f64) {
    let confident: Vec<usize> = (0..f.batch.len())
        .filter(|&i| f.batch.is_labeled(i) || f.batch.is_confident(i))
        .collect();
    let low: Vec<usize> = (0..f.batch.len())
        .filter(|&i| !f.batch.is_labeled(i) && !f.batch.is_confident(i))
        .collect();
    let unlabeled: Vec<usize> = (0..f.batch.len())
        .filter(|&i| !f.batch.is_labeled(i))
        .collect();

    let target = |i: usize| f.batch.label(i).or(f.batch.pseudo_labels()[i]).unwrap();
    let mut labels: Vec<usize> = confident.iter().map(|&i| target(i)).collect();
    labels.extend_from_within(..);
    let conf_stack = stack(f, &confident);
    let pc = pc_loss(conf_stack.view(), &labels, hp).unwrap().value;

    let all = concatenate(Axis(0), &[conf_stack.view(), stack(f, &low).view()]).unwrap();
    let (base, m) = (conf_stack.nrows(), low.len());
    let pairs: Vec<(usize, usize)> = (0..m).map(|j| (base + j, base + m + j)).collect();
    let uc = uc_loss(all.view(), &pairs, hp).unwrap().value;

    let entropy = entropy_regularizer(stack(f, &unlabeled).view()).value;
    (pc, uc, entropy)
}

fn only(keep: &str) -> Ablation {
    Ablation {
        no_am: false,
        no_pc: keep != "pc",
        no_uc: keep != "uc",
        no_entropy: keep != "entropy",
    }
}

#[test]
fn am_only_with_zero_margins_is_the_am_batch_loss() {
    let f = fixture(1);
    let hp = Hyperparams::default();
    let zeros = vec![0.0; K];
    let am = am_batch_loss(&f.batch, f.weak.view(), f.strong.view(), &zeros).unwrap();
    for ablation in [
        only("none"),
        Ablation {
            no_am: true,
            ..only("none")
        },
    ] {
        let total = total_loss(
            &f.batch,
            f.weak.view(),
            f.strong.view(),
            &zeros,
            &hp,
            ablation,
        )
        .unwrap();
        assert_eq!(total.value, am.value);
        assert_eq!(total.grad, am.grad);
    }
}

#[test]
fn zero_weights_without_entropy_leave_the_am_term() {
    let f = fixture(2);
    let hp = Hyperparams {
        pc_weight: 0.0,
        uc_weight: 0.0,
        ..Hyperparams::default()
    };
    let ablation = Ablation {
        no_entropy: true,
        ..Ablation::FULL
    };
    let total = total_loss(
        &f.batch,
        f.weak.view(),
        f.strong.view(),
        &f.margins,
        &hp,
        ablation,
    )
    .unwrap();
    let am = am_batch_loss(&f.batch, f.weak.view(), f.strong.view(), &f.margins).unwrap();
    assert_eq!(total.value, am.value);
    assert_eq!(total.grad, am.grad);
}

#[test]
fn each_optional_term_alone_reproduces_its_value() {
    for seed in 0..5 {
        let f = fixture(seed);
        let hp = Hyperparams::default();
        let am = am_batch_loss(&f.batch, f.weak.view(), f.strong.view(), &f.margins).unwrap();
        let (pc, uc, entropy) = independent_terms(&f, &hp);
        for (name, expected) in [("pc", pc), ("uc", uc), ("entropy", entropy)] {
            let total = total_loss(
                &f.batch,
                f.weak.view(),
                f.strong.view(),
                &f.margins,
                &hp,
                only(name),
            )
            .unwrap();
            let t = total.terms;
            let got = match name {
                "pc" => t.pc,
                "uc" => t.uc,
                _ => t.entropy,
            };
            assert_eq!(got, expected, "{name}");
            assert_eq!(
                t.pc + t.uc + t.entropy,
                expected,
                "{name}: other terms must be zero"
            );
            assert!((total.value - am.value - expected).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn full_objective_is_the_sum_of_its_terms() {
    for seed in 0..5 {
        let f = fixture(seed);
        let hp = Hyperparams {
            pc_weight: 0.7,
            uc_weight: 1.3,
            ..Hyperparams::default()
        };
        let am = am_batch_loss(&f.batch, f.weak.view(), f.strong.view(), &f.margins)
            .unwrap()
            .value;
        let (pc, uc, entropy) = independent_terms(&f, &hp);
        let total = total_loss(
            &f.batch,
            f.weak.view(),
            f.strong.view(),
            &f.margins,
            &hp,
            Ablation::FULL,
        )
        .unwrap();
        let expected = am + 0.7 * pc + 1.3 * uc + entropy;
        assert!(
            (total.value - expected).abs() < 1e-12,
            "{} vs {expected}",
            total.value
        );
        assert!(pc > 0.0 && uc > 0.0 && entropy > 0.0);
    }
}
