use fofa::error::Error;
use fofa::wire::{
    decode_request, deserialize_model, encode_request, serialize_model, ModelPayload,
};
use fofa_core::assembly::{request_wire_len, DeviceRequest, PROTOCOL_VERSION};
use fofa_core::backbone::{block_layout, BackboneConfig, GateIndicator};
use fofa_core::controller::StructureLogits;
use fofa_core::mapper::LatentInterest;
use fofa_core::Tensor;
use proptest::prelude::*;

fn payload(conv: bool, gate: Vec<bool>, d: usize, fill: &[f32]) -> ModelPayload {
    let mut bb = if conv {
        BackboneConfig::causal_conv(10)
    } else {
        BackboneConfig::attention(10)
    };
    bb.n_blocks = gate.len();
    bb.dilations = vec![1; gate.len()];
    bb.d = d;
    let gate = GateIndicator::from_execute(gate);
    let mut k = 0;
    let blocks = gate
        .kept()
        .map(|l| {
            let ts = block_layout(&bb)
                .iter()
                .map(|s| {
                    let n: usize = s.shape.iter().product();
                    let data = (0..n)
                        .map(|_| {
                            k += 1;
                            fill[k % fill.len()]
                        })
                        .collect();
                    Tensor::new(&s.shape, data).unwrap()
                })
                .collect();
            (l, ts)
        })
        .collect();
    ModelPayload { gate, blocks }
}

fn model_strategy() -> impl Strategy<Value = ModelPayload> {
    (
        any::<bool>(),
        proptest::collection::vec(any::<bool>(), 0..13),
        2usize..6,
        proptest::collection::vec(
            proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO,
            1..64,
        ),
    )
        .prop_map(|(conv, gate, half_d, fill)| payload(conv, gate, 2 * half_d, &fill))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn models_round_trip_bit_exactly(m in model_strategy()) {
        let bytes = serialize_model(&m);
        let back = deserialize_model(&bytes).unwrap();
        prop_assert_eq!(serialize_model(&back), bytes);
        prop_assert_eq!(back, m);
    }

    #[test]
    fn corrupted_models_are_rejected(m in model_strategy(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = serialize_model(&m);
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(deserialize_model(&bytes).is_err());
    }

    #[test]
    fn truncated_models_are_rejected(m in model_strategy(), at in any::<prop::sample::Index>()) {
        let bytes = serialize_model(&m);
        let cut = at.index(bytes.len());
        prop_assert!(deserialize_model(&bytes[..cut]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn requests_have_fixed_size_and_round_trip(
        device in any::<u64>(),
        beta in proptest::collection::vec(-5.0f32..5.0, 1..10),
        h in proptest::collection::vec(-3.0f32..3.0, 1..40),
    ) {
        let rows: Vec<[f32; 2]> = beta.iter().map(|&b| [b, -b]).collect();
        let req = DeviceRequest {
            device_id: device,
            version: PROTOCOL_VERSION,
            beta: StructureLogits::from_rows(&rows),
            h: LatentInterest { h: Tensor::vector(h.clone()) },
        };
        let bytes = encode_request(&req);
        prop_assert_eq!(bytes.len(), request_wire_len(rows.len(), h.len()));
        let back = decode_request(&bytes).unwrap();
        prop_assert_eq!(back.device_id, device);
        prop_assert_eq!(back.beta.beta(), req.beta.beta());
        prop_assert_eq!(back.h.h.data(), &h[..]);
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(matches!(decode_request(&longer), Err(Error::Malformed(_))));
    }
}
