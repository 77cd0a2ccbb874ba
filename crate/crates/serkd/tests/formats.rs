use std::collections::BTreeMap;

use proptest::prelude::*;

use serkd::config::RunConfig;
use serkd::format::{decode, decode_archive, decode_tensor, encode_archive, encode_tensor, encode_u32, Blob};
use serkd_core::Tensor;

fn shape_and_bits() -> impl Strategy<Value = (Vec<usize>, Vec<u64>)> {
    prop::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        (Just(shape), prop::collection::vec(any::<u64>(), n))
    })
}

proptest! {
    #[test]
    fn f64_tensors_roundtrip_bit_exactly((shape, bits) in shape_and_bits()) {
        let data: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
        let t = Tensor::new(data, &shape).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        prop_assert_eq!(&bytes[..4], b"SRKD");
        prop_assert_eq!(bytes.len(), 7 + 4 * shape.len() + 8 * bits.len());
        let back = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(back.shape(), &shape[..]);
        let back_bits: Vec<u64> = back.to_vec().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(back_bits, bits);
    }

    #[test]
    fn u32_blobs_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
        let n: usize = shape.iter().product();
        let data: Vec<u32> = (0..n as u32).map(|i| i.wrapping_mul(seed)).collect();
        let bytes = encode_u32(&shape, &data).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), Blob::U32 { shape, data });
    }

    #[test]
    fn truncated_blobs_are_rejected((shape, bits) in shape_and_bits(), cut in 1usize..8) {
        let data: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
        let bytes = encode_tensor(&Tensor::new(data, &shape).unwrap()).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode(&bytes[..keep]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(decode(&longer).is_err());
    }

    #[test]
    fn archives_roundtrip(names in prop::collection::btree_set("[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}", 0..6)) {
        let entries: BTreeMap<String, Tensor> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), Tensor::new(vec![i as f64; i + 1], &[i + 1]).unwrap()))
            .collect();
        let back = decode_archive(&encode_archive(&entries).unwrap()).unwrap();
        prop_assert_eq!(back.keys().collect::<Vec<_>>(), entries.keys().collect::<Vec<_>>());
        for (k, v) in &entries {
            prop_assert_eq!(back[k].to_vec(), v.to_vec());
        }
    }

    #[test]
    fn rendered_configs_parse_back(seed in any::<u64>(), lr in 1e-5f64..1e-1, rd in 0.0f64..4.0) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.distill_train.optim.lr = lr;
        cfg.distill.lambda_rd = rd;
        let back = RunConfig::parse(&cfg.render()).unwrap();
        prop_assert_eq!(back.render(), cfg.render());
        prop_assert_eq!(back.distill_train.optim.lr.to_bits(), lr.to_bits());
    }
}
