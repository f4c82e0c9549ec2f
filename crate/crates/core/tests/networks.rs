//! Architecture bookkeeping, tap extraction and the stop-gradient contract.

use mhkd::distill::{mhkd_loss, teacher_head_loss, AuxHeadSpec, AuxHeads, DistillConfig};
use mhkd::nn::{
    compression_percent, presets, ConvLayerSpec, GradMode, Network, NetworkSpec, Parameterized, PoolSpec, Source,
    TaskSpec, UnitSpec,
};
use mhkd::tensor::{BnMode, Tape, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn cifar_task(k: usize) -> TaskSpec {
    TaskSpec::new(k, (3, 32, 32))
}

/// Conv weights + bias + BN gamma/beta for a 3x3 layer.
fn conv3x3(ci: usize, co: usize) -> usize {
    co * ci * 9 + co + 2 * co
}

fn images(b: usize, seed: u64) -> Tensor<f32> {
    let mut rng = StdRng::seed_from_u64(seed);
    Tensor::new(&[b, 3, 32, 32], (0..b * 3072).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn preset_parameter_counts_match_hand_sums() {
    let teacher = conv3x3(3, 32)
        + conv3x3(32, 32)
        + conv3x3(32, 64)
        + conv3x3(64, 64)
        + conv3x3(64, 128)
        + conv3x3(128, 128)
        + (128 * 10 + 10);
    let student = conv3x3(3, 16) + conv3x3(16, 32) + conv3x3(32, 64) + (64 * 10 + 10);
    assert_eq!((teacher, student), (289_194, 24_458));
    let t = Network::<f32>::build(&presets::tiny_teacher(3), &cifar_task(10), Source::Teacher, 0).unwrap();
    let s = Network::<f32>::build(&presets::tiny_student(3), &cifar_task(10), Source::Student, 0).unwrap();
    assert_eq!(t.count_params(), teacher);
    assert_eq!(s.count_params(), student);
    assert_eq!(presets::tiny_teacher(3).param_count(&cifar_task(10)), teacher);
    let by_hand = 100.0 * (1.0 - 24_458.0 / 289_194.0);
    assert_eq!(compression_percent(s.count_params(), t.count_params()), by_hand);
    assert_eq!(format!("{by_hand:.2}"), "91.54");
}

#[test]
fn single_layer_counts() {
    // 432 weights + 16 bias + 32 BN affine.
    assert_eq!(ConvLayerSpec::same3x3(3, 16).param_count(), 480);
    // A net whose last unit has 10 channels and a 5-way head: the FC adds 10*5+5.
    let spec = NetworkSpec {
        name: "fc".into(),
        units: vec![
            UnitSpec { layers: vec![ConvLayerSpec::same3x3(3, 4)], pool: None },
            UnitSpec { layers: vec![ConvLayerSpec::same3x3(4, 4)], pool: None },
            UnitSpec { layers: vec![ConvLayerSpec::same3x3(4, 10)], pool: None },
        ],
        classifier: Default::default(),
    };
    let net = Network::<f32>::build(&spec, &TaskSpec::new(5, (3, 8, 8)), Source::Student, 0).unwrap();
    assert_eq!(net.count_params() - conv3x3(3, 4) - conv3x3(4, 4) - conv3x3(4, 10), 55);
}

#[test]
fn default_head_capacity_on_64_channels() {
    let k = 10;
    let by_hand = (256 * 64 * 9 + 256 + 2 * 256) + (256 * 256 * 9 + 256 + 2 * 256) + (256 * 128 + 128) + (128 * k + k);
    assert_eq!(by_hand, 773_002);
    assert_eq!(AuxHeadSpec::default().param_count(64, k), by_hand);
    let heads = AuxHeads::<f32>::build(&AuxHeadSpec::default(), &[1], |_| Some(64), k, 0).unwrap();
    assert_eq!(heads.count_params(), by_hand);
}

#[test]
fn head_maps_a_feature_to_logits() {
    let spec = AuxHeadSpec { conv_channels: 16, ..AuxHeadSpec::default() };
    let heads = AuxHeads::<f32>::build(&spec, &[1], |_| Some(64), 7, 3).unwrap();
    let feature = Tensor::full(&[4, 64, 16, 16], 0.25);
    assert_eq!(heads.heads[0].predict(&feature).unwrap().shape(), &[4, 7]);
}

#[test]
fn tap_shapes_follow_the_preset_tables() {
    let x = images(2, 1);
    for (spec, widths) in [(presets::tiny_teacher(3), [32, 64, 128]), (presets::tiny_student(3), [16, 32, 64])] {
        let net = Network::<f32>::build(&spec, &cifar_task(10), Source::Teacher, 0).unwrap();
        let (_, taps) = net.predict_with_taps(&x, &[1, 2, 3]).unwrap();
        let shapes: Vec<&[usize]> = taps.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![&[2, widths[0], 16, 16][..], &[2, widths[1], 8, 8], &[2, widths[2], 4, 4]]);
        let (_, none) = net.predict_with_taps(&x, &[]).unwrap();
        assert!(none.is_empty());
        assert!(net.predict_with_taps(&x, &[4]).is_err());
        assert!(net.predict_with_taps(&x, &[0]).is_err());
    }
}

#[test]
fn taps_do_not_perturb_logits() {
    let x = images(4, 2);
    let mut a = Network::<f32>::build(&presets::tiny_student(3), &cifar_task(10), Source::Student, 5).unwrap();
    let mut b = a.clone();
    for mode in [BnMode::Train, BnMode::Eval] {
        let mut ta = Tape::new();
        let xa = ta.constant(x.clone());
        let oa = a.forward_with_taps(&mut ta, xa, &[], mode, GradMode::Track).unwrap();
        let mut tb = Tape::new();
        let xb = tb.constant(x.clone());
        let ob = b.forward_with_taps(&mut tb, xb, &[1, 2, 3], mode, GradMode::Track).unwrap();
        assert!(ta.value(oa.logits).bit_eq(tb.value(ob.logits)));
        assert_eq!(ob.taps.len(), 3);
    }
    assert!(a.bit_eq(&b));
    assert!(a.predict(&x).unwrap().bit_eq(&a.predict(&x).unwrap()));
}

#[test]
fn build_is_seed_deterministic() {
    let spec = presets::tiny_teacher(3);
    let a = Network::<f32>::build(&spec, &cifar_task(10), Source::Teacher, 42).unwrap();
    let b = Network::<f32>::build(&spec, &cifar_task(10), Source::Teacher, 42).unwrap();
    let c = Network::<f32>::build(&spec, &cifar_task(10), Source::Teacher, 43).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
    // BN starts at gamma = 1, beta = 0.
    let params = a.params();
    assert!(params.iter().filter(|(n, _)| n.ends_with("bn.gamma")).all(|(_, t)| t.data().iter().all(|&v| v == 1.0)));
    assert!(params.iter().filter(|(n, _)| n.ends_with("bn.beta")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn fewer_than_three_units_is_rejected() {
    let mut spec = presets::tiny_student(3);
    spec.units.truncate(2);
    assert!(Network::<f32>::build(&spec, &cifar_task(10), Source::Student, 0).is_err());
    let mut bad = presets::tiny_student(3);
    bad.units[1].layers[0].in_channels = 17;
    assert!(Network::<f32>::build(&bad, &cifar_task(10), Source::Student, 0).is_err());
}

// Stop-gradient on a tiny f64 pair: 8x8 inputs, 2-3 channels per unit.

fn tiny_spec(name: &str, widths: [usize; 3]) -> NetworkSpec {
    let mut c = 3;
    let units = widths
        .iter()
        .map(|&w| {
            let l = ConvLayerSpec::same3x3(c, w);
            c = w;
            UnitSpec { layers: vec![l], pool: Some(PoolSpec { kernel: 2, stride: 2 }) }
        })
        .collect();
    NetworkSpec { name: name.into(), units, classifier: Default::default() }
}

struct Pair {
    teacher: Network<f64>,
    student: Network<f64>,
    heads_t: AuxHeads<f64>,
    heads_s: AuxHeads<f64>,
    x: Tensor<f64>,
    labels: Vec<usize>,
    cfg: DistillConfig,
}

fn pair() -> Pair {
    let task = TaskSpec::new(3, (3, 8, 8));
    let t_spec = tiny_spec("t", [3, 3, 3]);
    let s_spec = tiny_spec("s", [2, 2, 2]);
    let head = AuxHeadSpec { conv_channels: 2, fc_hidden: 3, ..AuxHeadSpec::default() };
    let cfg = DistillConfig::default();
    let mut rng = StdRng::seed_from_u64(77);
    let mut p = Pair {
        teacher: Network::build(&t_spec, &task, Source::Teacher, 1).unwrap(),
        student: Network::build(&s_spec, &task, Source::Student, 2).unwrap(),
        heads_t: AuxHeads::build(&head, &cfg.head_units, |u| t_spec.unit_channels(u), 3, 3).unwrap(),
        heads_s: AuxHeads::build(&head, &cfg.head_units, |u| s_spec.unit_channels(u), 3, 4).unwrap(),
        x: Tensor::new(&[4, 3, 8, 8], (0..4 * 192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        labels: vec![0, 1, 2, 1],
        cfg,
    };
    // Zero-initialized FC biases put a ReLU input exactly on its kink whenever a
    // head's pooled features are all zero; finite differences cannot see a
    // one-sided derivative, so move every bias off zero.
    let biases = p.heads_t.params_mut().into_iter().chain(p.heads_s.params_mut()).filter(|(n, _)| n.ends_with(".bias"));
    for (_, t) in biases {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
    }
    p
}

/// Full distillation objective (student loss plus teacher-head CE). The
/// teacher runs with tracked parameter leaves, and its outputs are detached
/// before they reach any head or loss, as in training. Also returns the
/// teacher-head CE sum on its own: teacher-head outputs are constant targets
/// inside the KL terms, so that sum is all the teacher heads are trained on.
struct Objective {
    total: Var,
    teacher_ce: Var,
    teacher_backbone: Vec<Var>,
    student: Vec<Var>,
    teacher_heads: Vec<Var>,
}

fn objective(p: &Pair, tape: &mut Tape<f64>) -> Objective {
    let (mut teacher, mut student) = (p.teacher.clone(), p.student.clone());
    let (mut heads_t, mut heads_s) = (p.heads_t.clone(), p.heads_s.clone());
    let x = tape.constant(p.x.clone());
    let units = &p.cfg.head_units;
    let mut out_t = teacher.forward_with_taps(tape, x, units, BnMode::Eval, GradMode::Track).unwrap();
    for tap in &mut out_t.taps {
        tap.var = tape.detach(tap.var);
    }
    let final_t = tape.detach(out_t.logits);
    let out_s = student.forward_with_taps(tape, x, units, BnMode::Train, GradMode::Track).unwrap();
    let loss =
        mhkd_loss(tape, &out_t.taps, &out_s.taps, &mut heads_t, &mut heads_s, final_t, out_s.logits, &p.labels, &p.cfg)
            .unwrap();
    let ces: Vec<Var> =
        loss.teacher_head_logits.iter().map(|&lt| teacher_head_loss(tape, lt, &p.labels).unwrap()).collect();
    let teacher_ce = ces[1..].iter().fold(ces[0], |acc, &c| tape.add(acc, c).unwrap());
    let total = tape.add(loss.total, teacher_ce).unwrap();
    let mut student_vars = out_s.params;
    student_vars.extend(loss.student_head_params);
    Objective {
        total,
        teacher_ce,
        teacher_backbone: out_t.params,
        student: student_vars,
        teacher_heads: loss.teacher_head_params,
    }
}

fn values(p: &Pair) -> (f64, f64) {
    let mut tape = Tape::new();
    let o = objective(p, &mut tape);
    (tape.value(o.total).item(), tape.value(o.teacher_ce).item())
}

#[derive(Clone, Copy)]
enum Group {
    TeacherBackbone,
    Student,
    TeacherHeads,
}

/// Adds `delta` to the `i`-th scalar of a parameter group.
fn nudge(p: &mut Pair, group: Group, i: usize, delta: f64) {
    let params: Vec<&mut Tensor<f64>> = match group {
        Group::TeacherBackbone => p.teacher.params_mut().into_iter().map(|(_, t)| t).collect(),
        Group::Student => p.student.params_mut().into_iter().chain(p.heads_s.params_mut()).map(|(_, t)| t).collect(),
        Group::TeacherHeads => p.heads_t.params_mut().into_iter().map(|(_, t)| t).collect(),
    };
    let mut i = i;
    for t in params {
        if i < t.numel() {
            t.data_mut()[i] += delta;
            return;
        }
        i -= t.numel();
    }
    panic!("parameter index out of range");
}

fn central_difference(group: Group, i: usize, h: f64, pick: fn((f64, f64)) -> f64) -> f64 {
    let mut up = pair();
    nudge(&mut up, group, i, h);
    let mut down = pair();
    nudge(&mut down, group, i, -h);
    (pick(values(&up)) - pick(values(&down))) / (2.0 * h)
}

#[test]
fn teacher_backbone_gets_zero_gradient_although_the_loss_depends_on_it() {
    let p = pair();
    let mut tape = Tape::new();
    let o = objective(&p, &mut tape);
    tape.backward(o.total).unwrap();
    assert!(!o.teacher_backbone.is_empty());
    for &v in &o.teacher_backbone {
        assert!(tape.grad(v).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }
    // The dependence is real: finite differences through the teacher are not zero.
    let largest = (0..p.teacher.count_params())
        .map(|i| central_difference(Group::TeacherBackbone, i, 1e-5, |v| v.0).abs())
        .fold(0.0, f64::max);
    assert!(largest > 1e-3, "objective does not depend on the teacher ({largest})");
}

#[test]
fn trainable_gradients_match_finite_differences() {
    let p = pair();
    let mut tape = Tape::new();
    let o = objective(&p, &mut tape);
    tape.backward(o.total).unwrap();
    let flat = |vars: &[Var]| -> Vec<f64> {
        vars.iter().flat_map(|&v| tape.grad(v).map_or(vec![0.0; tape.value(v).numel()], <[f64]>::to_vec)).collect()
    };
    let checks = [
        (Group::Student, flat(&o.student), (|v: (f64, f64)| v.0) as fn((f64, f64)) -> f64),
        (Group::TeacherHeads, flat(&o.teacher_heads), |v: (f64, f64)| v.1),
    ];
    for (group, analytic, pick) in checks {
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let fd = central_difference(group, i, 1e-6, pick);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
        }
        assert!(worst <= 1e-6, "max relative error {worst}");
    }
}
