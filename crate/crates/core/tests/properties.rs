use fofa_core::assembly::{cloud_assemble, device_prepare_request};
use fofa_core::backbone::{gated_forward, BackboneConfig, ForwardMode, GateIndicator};
use fofa_core::controller::{relax, StructureLogits};
use fofa_core::data::{preprocess, EventLog, PreprocessConfig, Record};
use fofa_core::mapper::generate_weights;
use fofa_core::model::{Mode, Model, ModelConfig};
use fofa_core::train::compact_loss;
use fofa_core::Tensor;
use proptest::prelude::*;

fn backbone(conv: bool, n_blocks: usize) -> BackboneConfig {
    let mut bb = if conv {
        BackboneConfig::causal_conv(25)
    } else {
        BackboneConfig::attention(25)
    };
    bb.n_blocks = n_blocks;
    bb.dilations = (0..n_blocks).map(|i| [1, 2, 4][i % 3]).collect();
    bb.d = 8;
    bb.max_seq_len = 10;
    bb
}

fn shared_weights(m: &Model) -> Vec<Vec<Tensor>> {
    m.shared_blocks().unwrap().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assembled_equals_masked_for_any_gate(
        seed in 0u64..10_000,
        conv in any::<bool>(),
        gate in proptest::collection::vec(any::<bool>(), 1..5),
        ids in proptest::collection::vec(0usize..25, 1..10),
    ) {
        let bb = backbone(conv, gate.len());
        let m = Model::init(ModelConfig::new(bb.clone(), Mode::ForwardOfa), seed).unwrap();
        let mapper = m.mapper().unwrap().unwrap();
        let shared = m.shared_head().unwrap();
        let mut req = device_prepare_request(&m, seed, &ids).unwrap();
        let rows: Vec<[f32; 2]> = gate.iter().map(|&on| if on { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        req.beta = StructureLogits::from_rows(&rows);
        let (am, _) = cloud_assemble(&bb, &mapper, &req).unwrap();
        prop_assert_eq!(am.gate.as_slice(), &gate[..]);
        let gen = generate_weights(&mapper, &req.h).unwrap();
        let all: Vec<Vec<Tensor>> = (0..bb.n_blocks).map(|k| gen.block_tensors(&bb, k).unwrap()).collect();
        let g = am.gate.to_tensor();
        let masked = gated_forward(&bb, &all, &shared, &ids, ForwardMode::TrainMasked { gate: &g }).unwrap();
        let next = am.score_next(&bb, &shared, &ids).unwrap();
        for (a, b) in next.iter().zip(masked.row(ids.len() - 1)) {
            prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn outputs_never_see_the_future(
        seed in 0u64..10_000,
        conv in any::<bool>(),
        ids in proptest::collection::vec(0usize..25, 2..10),
        cut in 1usize..9,
        replacement in 0usize..25,
    ) {
        let cut = cut.min(ids.len() - 1);
        let bb = backbone(conv, 3);
        let m = Model::init(ModelConfig::new(bb.clone(), Mode::DeviceRec), seed).unwrap();
        let w = shared_weights(&m);
        let shared = m.shared_head().unwrap();
        let mut changed = ids.clone();
        for v in &mut changed[cut..] {
            *v = (*v + replacement + 1) % 25;
        }
        let a = gated_forward(&bb, &w, &shared, &ids, ForwardMode::Ungated).unwrap();
        let b = gated_forward(&bb, &w, &shared, &changed, ForwardMode::Ungated).unwrap();
        for t in 0..cut {
            prop_assert_eq!(a.row(t), b.row(t));
        }
    }

    #[test]
    fn preprocessing_is_a_fixpoint(
        events in proptest::collection::vec((0u64..12, 0u64..15, 0i64..50), 20..300),
        min_user in 2usize..6,
        min_item in 1usize..5,
    ) {
        let log = EventLog { records: events.iter().map(|&(u, i, t)| Record::new(u, i, 1.0, t)).collect() };
        let cfg = PreprocessConfig { min_user, min_item };
        if let Ok(first) = preprocess(&log, cfg) {
            for u in &first.users {
                prop_assert!(u.train.len() + 1 >= min_user);
            }
            let mut counts = vec![0usize; first.n_items()];
            for u in &first.users {
                for &i in u.train.iter().chain([&u.test]) {
                    counts[i] += 1;
                }
            }
            prop_assert!(counts.iter().all(|&c| c >= min_item));
            let again = preprocess(&first.to_event_log(), cfg).unwrap();
            prop_assert_eq!(again, first);
        }
    }

    #[test]
    fn hard_gate_ignores_temperature(
        beta in proptest::collection::vec(-4.0f32..4.0, 2..12),
        noise in proptest::collection::vec(-2.0f32..2.0, 2..12),
        tau in 0.1f32..20.0,
    ) {
        let n = beta.len().min(noise.len()) / 2 * 2;
        let b = Tensor::new(&[n / 2, 2], beta[..n].to_vec()).unwrap();
        let z = Tensor::new(&[n / 2, 2], noise[..n].to_vec()).unwrap();
        let (_, g1) = relax(&b, &z, tau).unwrap();
        let (_, g2) = relax(&b, &z, 1.0).unwrap();
        prop_assert_eq!(&g1, &g2);
        let (lc, _) = compact_loss(&StructureLogits::new(b).unwrap());
        prop_assert!(lc >= 0.0);
    }
}

#[test]
fn all_execute_gate_is_the_ungated_stack() {
    let bb = backbone(false, 3);
    let m = Model::init(ModelConfig::new(bb.clone(), Mode::DeviceRec), 3).unwrap();
    let w = shared_weights(&m);
    let shared = m.shared_head().unwrap();
    let ids = [3, 1, 4, 1, 5, 9];
    let g = GateIndicator::all_execute(3).to_tensor();
    let a = gated_forward(
        &bb,
        &w,
        &shared,
        &ids,
        ForwardMode::TrainMasked { gate: &g },
    )
    .unwrap();
    let b = gated_forward(&bb, &w, &shared, &ids, ForwardMode::Ungated).unwrap();
    assert_eq!(a, b);
}
