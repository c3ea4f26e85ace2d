use anole_core::decoder::DecoderState;
use anole_core::linalg::softmax_in_place;
use anole_core::vocab::{compose, parse, ByteTokenizer, MultimodalDocument, Segment, VocabLayout};
use anole_core::vq::{embed, quantize, Codebook, LatentGrid, TokenGrid};
use proptest::prelude::*;

/// Exhaustive nearest neighbour, written independently of `Codebook::nearest`.
fn brute_force(latent: &LatentGrid<f32>, entries: &[f32], k: usize) -> Vec<u32> {
    let d = latent.dim;
    latent
        .values
        .chunks(d)
        .map(|cell| {
            let dists: Vec<f32> = (0..k)
                .map(|i| cell.iter().zip(&entries[i * d..(i + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f32::INFINITY, f32::min);
            dists.iter().position(|&x| x == min).unwrap() as u32
        })
        .collect()
}

fn grid_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>)> {
    (1usize..=64, 1usize..=6, 1usize..=4, 1usize..=4).prop_flat_map(|(k, d, h, w)| {
        // coarse values make exact ties common
        let v = (-4i32..=4).prop_map(|x| x as f32 * 0.5);
        (Just(k), Just(d), prop::collection::vec(v.clone(), k * d), prop::collection::vec(v, h * w * d))
    })
}

proptest! {
    #[test]
    fn quantize_equals_brute_force((k, d, entries, values) in grid_strategy()) {
        let cells = values.len() / d;
        let cb = Codebook::new(k, d, entries.clone()).unwrap();
        let latent = LatentGrid::new(1, cells, d, values).unwrap();
        prop_assert_eq!(quantize(&latent, &cb).unwrap().ids, brute_force(&latent, &entries, k));
    }

    #[test]
    fn quantize_is_a_projection(seed in any::<u64>(), k in 1usize..=64, d in 1usize..=8) {
        // distinct rows: a strictly increasing first coordinate
        let entries: Vec<f32> = (0..k * d)
            .map(|i| if i % d == 0 { (i / d) as f32 } else { ((seed as usize ^ i) % 97) as f32 / 13.0 })
            .collect();
        let cb = Codebook::new(k, d, entries).unwrap();
        let ids: Vec<u32> = (0..12).map(|i| ((seed as usize / (i + 1)) % k) as u32).collect();
        let grid = TokenGrid::new(3, 4, ids).unwrap();
        prop_assert_eq!(quantize(&embed(&grid, &cb).unwrap(), &cb).unwrap(), grid);
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f32..30.0, 1..400)) {
        let mut v = v;
        softmax_in_place(&mut v);
        let s: f64 = v.iter().map(|&x| x as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }
}

fn doc_strategy(layout: VocabLayout) -> impl Strategy<Value = MultimodalDocument> {
    let n = layout.block_len();
    let k = layout.image_vocab();
    let seg = prop_oneof![
        "[ -~]{0,12}".prop_map(Segment::Text),
        "\\PC{1,4}".prop_map(Segment::Text),
        prop::collection::vec(0..k, n).prop_map(move |ids| {
            Segment::Tokens(TokenGrid::new(layout.grid_height() as usize, layout.grid_width() as usize, ids).unwrap())
        }),
    ];
    prop::collection::vec(seg, 0..6).prop_map(MultimodalDocument::new)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn compose_parse_round_trip(doc in doc_strategy(VocabLayout::new(256, 16, 2, 3).unwrap())) {
        let layout = VocabLayout::new(256, 16, 2, 3).unwrap();
        let text = ByteTokenizer::default();
        let seq = compose(&doc, &layout, &text, None).unwrap();
        let text_len: usize = doc.segments.iter().map(|s| match s { Segment::Text(t) => t.len(), _ => 0 }).sum();
        prop_assert_eq!(seq.len(), 2 + text_len + (layout.block_len() + 2) * doc.image_count());
        prop_assert_eq!(parse(&seq, &layout).unwrap(), doc.normalized());

        // the composed sequence is accepted token by token by the decoder grammar
        let mut state = DecoderState::new(&layout, seq.len(), usize::MAX).unwrap();
        for &tok in &seq[1..] {
            prop_assert!(state.push(tok, &layout).is_ok());
        }
        prop_assert!(state.is_done());
    }
}

#[test]
fn every_id_has_exactly_one_class() {
    for layout in [VocabLayout::new(256, 64, 8, 8).unwrap(), VocabLayout::new(7, 1, 1, 1).unwrap()] {
        for id in 0..layout.total() {
            let c = layout.classify(id).unwrap();
            let is_text = id < layout.text_vocab();
            assert_eq!(is_text, c == anole_core::vocab::TokenClass::Text);
            assert_eq!(layout.is_image(id), c == anole_core::vocab::TokenClass::Image);
        }
    }
}
