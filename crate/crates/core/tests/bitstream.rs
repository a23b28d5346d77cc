use cafc_core::bitstream::{compute_bpp, decode_packet, encode_packet, index_bits, packet_len, HEADER_LEN};
use cafc_core::selection::SelectionResult;
use cafc_core::Error;
use proptest::prelude::*;

/// Built by hand so that empty selections (K = 0) are covered too.
fn selection(mask_bits: Vec<bool>) -> SelectionResult {
    let kept_positions: Vec<usize> = (0..mask_bits.len()).filter(|&p| mask_bits[p]).collect();
    SelectionResult {
        k: kept_positions.len(),
        kept_positions,
        mask_bits,
    }
}

/// Grid, codebook size, full index map and a consistent selection.
fn packet_input() -> impl Strategy<Value = (usize, usize, usize, Vec<u32>, SelectionResult)> {
    (1usize..12, 1usize..12, 2usize..5000).prop_flat_map(|(h, w, n)| {
        let total = h * w;
        (
            Just(h),
            Just(w),
            Just(n),
            proptest::collection::vec(0..n as u32, total),
            proptest::collection::vec(any::<bool>(), total),
        )
            .prop_map(|(h, w, n, idx, mask)| (h, w, n, idx, selection(mask)))
    })
}

fn valid_packet() -> impl Strategy<Value = Vec<u8>> {
    packet_input().prop_map(|(h, w, n, idx, sel)| encode_packet(h, w, &idx, &sel, n).unwrap())
}

/// Independent bit-by-bit reference for the payload layout.
fn reference_payload(idx: &[u32], sel: &SelectionResult, n: usize) -> Vec<u8> {
    let bits = (n as f64).log2().ceil() as usize;
    let mut stream = Vec::new();
    for p in 0..idx.len() {
        if sel.mask_bits[p] {
            for b in (0..bits).rev() {
                stream.push((idx[p] >> b) & 1 == 1);
            }
        }
    }
    stream
        .chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i))))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn roundtrip_and_length((h, w, n, idx, sel) in packet_input()) {
        let bytes = encode_packet(h, w, &idx, &sel, n).unwrap();
        prop_assert_eq!(bytes.len(), packet_len(h, w, n, sel.k));
        let bits = (n as f64).log2().ceil() as usize;
        prop_assert_eq!(bytes.len(), 17 + (h * w).div_ceil(8) + (sel.k * bits).div_ceil(8));
        let p = decode_packet(&bytes).unwrap();
        prop_assert_eq!((p.h, p.w, p.n), (h, w, n));
        let kept: Vec<u32> = sel.kept_positions.iter().map(|&q| idx[q]).collect();
        prop_assert_eq!(&p.indices, &kept);
        prop_assert_eq!(&p.selection, &sel);
        prop_assert_eq!(&bytes[HEADER_LEN + (h * w).div_ceil(8)..], &reference_payload(&idx, &sel, n)[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn any_single_mask_bit_flip_is_corruption(bytes in valid_packet()) {
        let h = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
        let w = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
        for p in 0..h * w {
            let mut bad = bytes.clone();
            bad[HEADER_LEN + p / 8] ^= 0x80 >> (p % 8);
            prop_assert!(matches!(decode_packet(&bad), Err(Error::Corruption(_))), "bit {}", p);
        }
    }

    #[test]
    fn every_truncation_is_length_error(bytes in valid_packet()) {
        for cut in 5..bytes.len() {
            prop_assert!(matches!(decode_packet(&bytes[..cut]), Err(Error::Length { .. })), "cut {}", cut);
        }
    }

    #[test]
    fn bad_magic_is_format_error(bytes in valid_packet(), pos in 0usize..4, x in 1u8..=255) {
        let mut bad = bytes;
        bad[pos] ^= x;
        prop_assert!(matches!(decode_packet(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn bpp_strictly_increasing_in_k(n in 2usize..100_000, h in 1usize..20, w in 1usize..20, scale in 1usize..16) {
        let (height, width) = (h * scale, w * scale);
        let mut last = -1.0;
        for k in 0..=h * w {
            let r = compute_bpp(k, n, h, w, height, width).unwrap();
            prop_assert_eq!(r.total_bits, r.index_bits + r.mask_bits);
            prop_assert_eq!(r.mask_bits, (h * w) as u64);
            prop_assert!(r.bpp > last);
            last = r.bpp;
        }
    }
}

#[test]
fn header_is_little_endian() {
    let sel = SelectionResult::from_positions(600, vec![1, 599]).unwrap();
    let idx = vec![0u32; 600];
    let bytes = encode_packet(20, 30, &idx, &sel, 70_000).unwrap();
    assert_eq!(&bytes[..5], b"CAFC\x01");
    assert_eq!(&bytes[5..9], &[20, 0, 30, 0]);
    assert_eq!(&bytes[9..13], &70_000u32.to_le_bytes());
    assert_eq!(&bytes[13..17], &[2, 0, 0, 0]);
}

#[test]
fn mask_is_msb_first_row_major() {
    let sel = SelectionResult::from_positions(10, vec![0, 7, 8]).unwrap();
    let bytes = encode_packet(2, 5, &[0; 10], &sel, 2).unwrap();
    assert_eq!(&bytes[HEADER_LEN..HEADER_LEN + 2], &[0b1000_0001, 0b1000_0000]);
}

#[test]
fn index_bit_widths() {
    let cases = [(2, 1), (3, 2), (4, 2), (5, 3), (64, 6), (65, 7), (1024, 10), (1025, 11)];
    for (n, want) in cases {
        assert_eq!(index_bits(n), want, "N = {n}");
    }
}

#[test]
fn trailing_bytes_are_rejected() {
    let sel = SelectionResult::all(4);
    let mut bytes = encode_packet(2, 2, &[1, 2, 3, 0], &sel, 4).unwrap();
    bytes.push(0);
    assert!(decode_packet(&bytes).is_err());
}

#[test]
fn encoding_is_deterministic() {
    let sel = SelectionResult::from_positions(16, vec![3, 4, 9]).unwrap();
    let idx: Vec<u32> = (0..16).collect();
    let a = encode_packet(4, 4, &idx, &sel, 16).unwrap();
    let b = encode_packet(4, 4, &idx, &sel, 16).unwrap();
    assert_eq!(a, b);
}
