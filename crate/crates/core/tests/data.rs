mod common;

use common::corpus;
use projcomp::data::{detokenize, stream_digest, tokenize, TokenStream, PAD_ID, VOCAB_SIZE};
use projcomp::{Error, ErrorCategory};
use proptest::prelude::*;

fn sonnets(seq: usize, seed: u64) -> TokenStream {
    TokenStream::from_files(&[corpus()], seq, seed).unwrap()
}

#[test]
fn abcdef_first_window() {
    let s = TokenStream::from_documents(vec![b"abcdef".to_vec()], 2, 0).unwrap();
    let (i, t) = s.window(0, 0).unwrap();
    assert_eq!(i, tokenize(b"ab"));
    assert_eq!(t, tokenize(b"bc"));
    assert_eq!(s.num_windows(), 4);
}

#[test]
fn same_seed_same_first_hundred_batches() {
    let mut a = sonnets(32, 11);
    let mut b = sonnets(32, 11);
    for _ in 0..100 {
        assert_eq!(a.next_batch(4), b.next_batch(4));
    }
    let mut c = sonnets(32, 12);
    assert_ne!(stream_digest(&mut a, 100, 4), stream_digest(&mut c, 100, 4));
}

#[test]
fn digest_is_position_independent_and_resumable() {
    let mut a = sonnets(16, 3);
    let before = stream_digest(&mut a, 20, 4);
    for _ in 0..7 {
        a.next_batch(4);
    }
    assert_eq!(stream_digest(&mut a, 20, 4), before);
    let eighth = a.next_batch(4);
    let mut b = sonnets(16, 3);
    b.seek(7);
    assert_eq!(b.next_batch(4), eighth);
    assert_eq!(b.batch_at(7, 4), eighth);
}

#[test]
fn targets_are_inputs_shifted_by_one() {
    let mut s = sonnets(24, 5);
    let bytes = std::fs::read(corpus()).unwrap();
    for i in 0..50 {
        let b = s.batch_at(i, 3);
        for row in 0..3 {
            let inp = &b.inputs[row * 24..(row + 1) * 24];
            let tgt = &b.targets[row * 24..(row + 1) * 24];
            assert_eq!(&inp[1..], &tgt[..23]);
            assert!(inp
                .iter()
                .chain(tgt)
                .all(|&t| t < VOCAB_SIZE && t != PAD_ID));
            // the window exists verbatim in the corpus
            let needle: Vec<u8> = detokenize(inp).unwrap();
            assert!(bytes.windows(24).any(|w| w == needle.as_slice()));
        }
    }
}

/// Total-variation distance between the emitted token histogram and the
/// corpus byte histogram.
#[test]
fn token_histogram_matches_corpus() {
    let bytes = std::fs::read(corpus()).unwrap();
    let mut expect = [0f64; 256];
    for &b in &bytes {
        expect[b as usize] += 1.0;
    }
    let mut seen = vec![0f64; VOCAB_SIZE];
    let mut s = sonnets(32, 9);
    for _ in 0..10_000 {
        for t in s.next_batch(8).inputs {
            seen[t] += 1.0;
        }
    }
    let n_seen: f64 = seen.iter().sum();
    let n_expect = bytes.len() as f64;
    let tv = 0.5
        * (0..VOCAB_SIZE)
            .map(|i| (seen[i] / n_seen - expect.get(i).copied().unwrap_or(0.0) / n_expect).abs())
            .sum::<f64>();
    assert!(tv < 0.02, "TV distance {tv}");
    assert_eq!(seen[PAD_ID], 0.0);
}

#[test]
fn short_corpus_is_a_data_error() {
    let e = TokenStream::from_documents(vec![b"abc".to_vec()], 3, 0).unwrap_err();
    assert!(matches!(e, Error::CorpusTooShort { len: 3, needed: 4 }));
    assert_eq!(e.category(), ErrorCategory::Data);
    assert!(TokenStream::from_files(&["/nonexistent/corpus.txt"], 4, 0).is_err());
}

#[test]
fn tokenize_edge_cases() {
    assert_eq!(tokenize(b"AB"), vec![65, 66]);
    assert!(tokenize(b"").is_empty());
    assert!(detokenize(&[PAD_ID]).unwrap().is_empty());
    assert!(detokenize(&[VOCAB_SIZE]).is_err());
}

proptest! {
    #[test]
    fn tokenize_round_trips(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        prop_assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
    }

    #[test]
    fn equal_streams_agree_at_any_index(seed in any::<u64>(), index in 0u64..10_000, bs in 1usize..6) {
        let docs = vec![b"the quick brown fox jumps over the lazy dog".to_vec(), b"pack my box with five dozen liquor jugs".to_vec()];
        let mut a = TokenStream::from_documents(docs.clone(), 5, seed).unwrap();
        let mut b = TokenStream::from_documents(docs, 5, seed).unwrap();
        b.seek(index);
        prop_assert_eq!(a.batch_at(index, bs), b.next_batch(bs));
    }
}
