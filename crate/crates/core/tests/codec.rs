mod common;

use common::events::{arb_batch, arb_single};
use ovinet_core::lpp::{
    decode_json, decode_lpp, encode_json, encode_lpp, encode_lpp_ack, ChannelMap, CodecError, LORAWAN_MAX_PAYLOAD,
};
use proptest::prelude::*;
use proptest::strategy::ValueTree;

proptest! {
    #[test]
    fn json_round_trip_is_exact(ev in arb_batch()) {
        let text = encode_json(&ev).unwrap();
        prop_assert_eq!(decode_json(&text).unwrap(), ev);
    }

    #[test]
    fn ack_frames_carry_the_sequence(ev in arb_single(), seq in any::<u8>()) {
        let map = ChannelMap::default();
        let plain = encode_lpp(&ev, &map).unwrap();
        let ack = encode_lpp_ack(&ev, &map, seq).unwrap();
        prop_assert_eq!(ack.len(), plain.len() + 3);
        let d = decode_lpp(ack.bytes(), &map).unwrap();
        prop_assert_eq!(d.rpc_ack, Some(seq));
        prop_assert_eq!(d.egg_count, Some(ev.readings[0].egg_count));
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        let _ = decode_lpp(&bytes, &ChannelMap::default());
    }

    #[test]
    fn truncated_frames_are_errors(ev in arb_single(), cut in 1usize..43) {
        let map = ChannelMap::default();
        let frame = encode_lpp(&ev, &map).unwrap();
        let keep = frame.len() - cut;
        // A cut on a record boundary leaves a shorter valid frame.
        if let Ok(d) = decode_lpp(&frame.bytes()[..keep], &map) {
            prop_assert!(!d.has_status());
        }
    }
}

#[test]
fn oversized_input_is_refused() {
    let bytes = vec![0u8; LORAWAN_MAX_PAYLOAD + 1];
    assert!(matches!(decode_lpp(&bytes, &ChannelMap::default()), Err(CodecError::TooLong(243))));
}

#[test]
fn batches_do_not_fit_lpp() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let ev = arb_batch().new_tree(&mut runner).unwrap().current();
    let r = encode_lpp(&ev, &ChannelMap::default());
    if ev.readings.len() == 1 {
        assert!(r.is_ok());
    } else {
        assert_eq!(r, Err(CodecError::TooManyReadings(ev.readings.len())));
    }
}
