//! FLM1 container properties over randomly generated models.

use std::collections::BTreeMap;

use fedsim_core::model::{
    decode_model, decode_model_from, encode_model, encode_model_to, encoded_len, param_entry_len,
    DType, FLModel, ModelError, ParamMap, Tensor, TensorData, FIXED_HEADER_LEN,
    METRIC_ENTRY_OVERHEAD, META_ENTRY_OVERHEAD,
};
use proptest::prelude::*;

fn arb_shape() -> impl Strategy<Value = Vec<u64>> {
    prop_oneof![
        Just(vec![]),
        Just(vec![0]),
        Just(vec![3, 0, 2]),
        proptest::collection::vec(1u64..5, 1..4),
    ]
}

fn arb_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>(),
        Just(f64::NAN),
        Just(f64::INFINITY),
        Just(f64::NEG_INFINITY),
        Just(-0.0),
        Just(f64::from_bits(0x7ff8_dead_beef_0001)),
    ]
}

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    (arb_shape(), 0u8..4).prop_flat_map(|(shape, code)| {
        let n = shape.iter().product::<u64>() as usize;
        let data = match code {
            0 => proptest::collection::vec(any::<f32>(), n).prop_map(TensorData::F32).boxed(),
            1 => proptest::collection::vec(arb_f64(), n).prop_map(TensorData::F64).boxed(),
            2 => proptest::collection::vec(any::<i64>(), n).prop_map(TensorData::I64).boxed(),
            _ => proptest::collection::vec(any::<u8>(), n).prop_map(TensorData::U8).boxed(),
        };
        data.prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

fn arb_model() -> impl Strategy<Value = FLModel> {
    (
        proptest::collection::vec(("[a-z][a-z0-9._]{0,20}", arb_tensor()), 0..6),
        proptest::collection::btree_map("[a-z_]{1,12}", arb_f64(), 0..4),
        proptest::collection::btree_map("[a-z_]{1,12}", "\\PC{0,40}", 0..4),
        0u32..100,
        any::<u64>(),
    )
        .prop_map(|(params, metrics, meta, round, num_samples)| {
            let mut map = ParamMap::new();
            for (k, t) in params {
                map.insert(k, t);
            }
            let mut m = FLModel::new(map).with_rounds(round, round + 1);
            m.metrics = metrics;
            m.meta = meta;
            m.num_samples = num_samples;
            m
        })
}

fn analytic_len(m: &FLModel) -> u64 {
    FIXED_HEADER_LEN
        + m.params
            .iter()
            .map(|(k, t)| param_entry_len(k.len(), t.dtype(), t.shape()).unwrap())
            .sum::<u64>()
        + m.metrics.keys().map(|k| METRIC_ENTRY_OVERHEAD + k.len() as u64).sum::<u64>()
        + m.meta
            .iter()
            .map(|(k, v)| META_ENTRY_OVERHEAD + (k.len() + v.len()) as u64)
            .sum::<u64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decode_inverts_encode(m in arb_model()) {
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        let order: Vec<&String> = back.params.keys().collect();
        prop_assert_eq!(order, m.params.keys().collect::<Vec<_>>());
    }

    #[test]
    fn encoding_is_deterministic(m in arb_model()) {
        prop_assert_eq!(encode_model(&m).unwrap(), encode_model(&m.clone()).unwrap());
    }

    #[test]
    fn length_follows_size_law(m in arb_model()) {
        let bytes = encode_model(&m).unwrap();
        prop_assert_eq!(bytes.len() as u64, analytic_len(&m));
        prop_assert_eq!(encoded_len(&m), analytic_len(&m));
    }

    #[test]
    fn streaming_codec_matches_buffered(m in arb_model()) {
        let mut out = Vec::new();
        let n = encode_model_to(&m, &mut out).unwrap();
        prop_assert_eq!(n, out.len() as u64);
        prop_assert_eq!(&out, &encode_model(&m).unwrap());
        prop_assert_eq!(decode_model_from(&out[..]).unwrap(), m);
    }

    #[test]
    fn trailing_garbage_and_truncation_are_rejected(m in arb_model(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_model(&m).unwrap();
        let at = cut.index(bytes.len());
        prop_assert!(decode_model(&bytes[..at]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(decode_model(&longer).is_err());
    }
}

#[test]
fn size_law_by_hand() {
    let mut params = ParamMap::new();
    params.insert("w".into(), Tensor::from_f32(vec![2, 3], vec![0.0; 6]).unwrap());
    let mut m = FLModel::new(params);
    m.metrics = BTreeMap::from([("loss".to_owned(), 0.5)]);
    // header 33, entry 12 + 1 + 2·8 + 6·4 = 53, metric 10 + 4 = 14
    assert_eq!(encode_model(&m).unwrap().len(), 33 + 53 + 14);
    assert_eq!(param_entry_len(1, DType::F32, &[2, 3]), Some(53));
}

#[test]
fn wrong_magic_is_typed() {
    let mut bytes = encode_model(&FLModel::default()).unwrap();
    bytes[0] = b'X';
    assert!(matches!(decode_model(&bytes), Err(ModelError::BadMagic(_))));
}
