use proptest::prelude::*;
use vlc_cp::bits::BitString;
use vlc_cp::cpm::*;

fn key() -> MacKey {
    MacKey(*b"vlc-cp test key!")
}

fn object() -> impl Strategy<Value = PerceivedObject> {
    (any::<i16>(), any::<i16>(), -16_384i16..=16_383, -16_384i16..=16_383, 0u16..=4095).prop_map(
        |(x, y, vx, vy, delta_t)| PerceivedObject { x, y, vx, vy, delta_t },
    )
}

fn message(max_objects: usize) -> impl Strategy<Value = CollectivePerceptionMessage> {
    (
        any::<u16>(),
        any::<u64>(),
        any::<(u8, u8, u32)>(),
        -900_000_000i32..=900_000_000,
        -1_800_000_000i32..=1_800_000_000,
        any::<u16>(),
        proptest::collection::vec(object(), 0..=max_objects),
    )
        .prop_map(|(psid, gt, (pv, mid, sid), lat, lon, rt, objects)| CollectivePerceptionMessage {
            header: CpmHeader {
                psid,
                generation_time: gt,
            },
            pdu: ItsPduHeader {
                protocol_version: pv,
                message_id: mid,
                station_id: sid,
            },
            management: ManagementContainer {
                latitude: lat,
                longitude: lon,
                reference_time: rt,
            },
            objects,
            mac: 0,
        })
}

fn extreme_message() -> CollectivePerceptionMessage {
    CollectivePerceptionMessage {
        header: CpmHeader {
            psid: u16::MAX,
            generation_time: u64::MAX,
        },
        pdu: ItsPduHeader {
            protocol_version: 255,
            message_id: 0,
            station_id: u32::MAX,
        },
        management: ManagementContainer {
            latitude: -900_000_000,
            longitude: 1_800_000_000,
            reference_time: u16::MAX,
        },
        objects: vec![
            PerceivedObject {
                x: i16::MIN,
                y: i16::MAX,
                vx: -16_384,
                vy: 16_383,
                delta_t: 4095,
            },
            PerceivedObject {
                x: -1,
                y: 0,
                vx: -1,
                vy: 0,
                delta_t: 0,
            },
        ],
        mac: 0,
    }
}

// field widths listed independently of the codec
const FIXED_FIELDS: [usize; 9] = [16, 64, 8, 8, 32, 32, 32, 16, 64];
const OBJECT_FIELDS: [usize; 5] = [16, 16, 15, 15, 12];

#[test]
fn size_law_from_field_widths() {
    let fixed: usize = FIXED_FIELDS.iter().sum();
    let per_object: usize = OBJECT_FIELDS.iter().sum();
    assert_eq!((fixed, per_object), (272, 74));
    for n in 0..=16 {
        assert_eq!(cpm_size_bits(n), fixed + per_object * n);
    }
    assert_eq!(cpm_size_bits(2), 420);
    assert_eq!(cpm_size_bits(2).div_ceil(8), 53);
    assert_eq!(etsi_cpm_size_bits(1, 1), 2120);
}

#[test]
fn encoded_lengths_follow_size_law() {
    let mut msg = extreme_message();
    for n in 0..=16 {
        msg.objects = vec![msg.objects.first().copied().unwrap_or(PerceivedObject {
            x: 1,
            y: 2,
            vx: 3,
            vy: 4,
            delta_t: 5,
        }); n];
        assert_eq!(encode_cpm(&msg, &key()).unwrap().len(), 272 + 74 * n);
    }
}

#[test]
fn extreme_values_round_trip() {
    let msg = extreme_message();
    let bits = encode_cpm(&msg, &key()).unwrap();
    let back = decode_cpm(&bits, &key()).unwrap();
    assert_eq!(back.objects, msg.objects);
    assert_eq!(back.management, msg.management);
    assert_eq!(back.header, msg.header);
    assert_eq!(back.pdu, msg.pdu);
}

#[test]
fn extreme_values_on_the_wire() {
    let bits = encode_cpm(&extreme_message(), &key()).unwrap();
    assert_eq!(bits.read_bits(0, 16).unwrap(), 0xFFFF);
    assert_eq!(bits.read_bits(16, 64).unwrap(), u64::MAX);
    assert_eq!(bits.read_bits(80, 8).unwrap(), 0xFF);
    assert_eq!(bits.read_bits(88, 8).unwrap(), 0);
    // latitude -900000000 as 32-bit two's complement
    assert_eq!(bits.read_bits(128, 32).unwrap(), (1u64 << 32) - 900_000_000);
    assert_eq!(bits.read_bits(160, 32).unwrap(), 1_800_000_000);
    // first object: x = -32768, vx = -16384 (15-bit), delta_t = 4095
    assert_eq!(bits.read_bits(208, 16).unwrap(), 0x8000);
    assert_eq!(bits.read_bits(224, 16).unwrap(), 0x7FFF);
    assert_eq!(bits.read_bits(240, 15).unwrap(), 0x4000);
    assert_eq!(bits.read_bits(255, 15).unwrap(), 0x3FFF);
    assert_eq!(bits.read_bits(270, 12).unwrap(), 0xFFF);
}

#[test]
fn out_of_range_fields_rejected() {
    let cases: [(&str, fn(&mut CollectivePerceptionMessage)); 6] = [
        ("latitude", |m| m.management.latitude = 900_000_001),
        ("longitude", |m| m.management.longitude = -1_800_000_001),
        ("vx", |m| m.objects[0].vx = -16_385),
        ("vy", |m| m.objects[0].vy = 16_384),
        ("delta_t", |m| m.objects[0].delta_t = 4096),
        ("objects", |m| m.objects = vec![m.objects[0]; 256]),
    ];
    for (field, mutate) in cases {
        let mut m = extreme_message();
        mutate(&mut m);
        match encode_cpm(&m, &key()) {
            Err(CodecError::Range { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {other:?}"),
        }
    }
}

#[test]
fn every_single_bit_flip_fails_authentication() {
    let mut msg = extreme_message();
    msg.objects[1].x = 1234;
    let bits = encode_cpm(&msg, &key()).unwrap();
    assert_eq!(bits.len(), 420);
    for i in 0..bits.len() {
        let mut t = bits.clone();
        t.flip(i);
        assert_eq!(decode_cpm(&t, &key()), Err(CodecError::Authentication), "bit {i}");
    }
}

#[test]
fn wrong_lengths_are_framing_errors() {
    let bits = encode_cpm(&extreme_message(), &key()).unwrap();
    for len in [0, 1, 271, 273, 345, 419, 421, 424] {
        let t = if len <= bits.len() {
            bits.slice(0, len)
        } else {
            let mut t = bits.clone();
            for _ in bits.len()..len {
                t.push(false);
            }
            t
        };
        assert_eq!(decode_cpm(&t, &key()), Err(CodecError::Framing { len }));
    }
}

#[test]
fn padded_payload_round_trips() {
    let bits = encode_cpm(&extreme_message(), &key()).unwrap();
    let padded = bits.padded_to_byte();
    assert_eq!(padded.as_bytes().len(), 53);
    let recovered = BitString::from_bytes_truncated(padded.as_bytes(), 420).unwrap();
    assert_eq!(recovered, bits);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn round_trip(msg in message(4)) {
        let bits = encode_cpm(&msg, &key()).unwrap();
        prop_assert_eq!(bits.len(), 272 + 74 * msg.objects.len());
        let back = decode_cpm(&bits, &key()).unwrap();
        let mut expect = msg.clone();
        expect.mac = back.mac;
        prop_assert_eq!(back, expect);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn random_bit_strings_never_panic(bits in proptest::collection::vec(any::<bool>(), 0..900)) {
        let b = BitString::from_bools(&bits);
        let _ = decode_cpm(&b, &key());
    }

    #[test]
    fn any_flip_detected(msg in message(3), pick in any::<prop::sample::Index>()) {
        let bits = encode_cpm(&msg, &key()).unwrap();
        let mut t = bits.clone();
        t.flip(pick.index(bits.len()));
        prop_assert_eq!(decode_cpm(&t, &key()), Err(CodecError::Authentication));
    }
}
