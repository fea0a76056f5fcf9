use hier_core::corpus::*;
use hier_core::synth::{generate_synthetic, SyntheticSpec};
use proptest::prelude::*;

fn doc_from(words: &[String], label: Label) -> Document {
    Document {
        id: "d".into(),
        text: words.join(" "),
        label,
        split: Split::Train,
    }
}

fn words_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{1,6}", 1..400)
}

proptest! {
    #[test]
    fn chunks_reconstruct_the_document(words in words_strategy(), chunk_len in 1usize..60, frac in 0.0f64..1.0) {
        let overlap = ((chunk_len as f64) * frac) as usize;
        prop_assume!(overlap < chunk_len);
        let params = ChunkingParams { chunk_len, overlap };
        let doc = doc_from(&words, Label::Accepted);
        let chunks = chunk_document(&doc, params).unwrap();
        prop_assert_eq!(dechunk(&chunks, overlap), words.clone());
        prop_assert_eq!(chunks.len(), params.chunk_count(words.len()));
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.index, i);
            prop_assert!(!c.words.is_empty() && c.words.len() <= chunk_len);
            prop_assert_eq!(&c.words[0], &words[i * params.stride()]);
            prop_assert_eq!(c.label, Label::Accepted);
        }
        prop_assert_eq!(chunks.last().unwrap().words.last(), words.last());
    }

    #[test]
    fn encoding_round_trips_short_chunks(words in prop::collection::vec("[a-c]{1,2}", 1..20)) {
        let doc = doc_from(&words, Label::Rejected);
        let corpus = Corpus::new(vec![doc.clone()]).unwrap();
        let vocab = build_vocab(&corpus, 100, 1).unwrap();
        let max_len = words.len() + 3;
        let seq = encode_words(&words, &vocab, max_len).unwrap();
        prop_assert_eq!(seq.ids[0], CLS_ID);
        prop_assert_eq!(seq.ids[words.len() + 1], SEP_ID);
        prop_assert_eq!(seq.ids.iter().filter(|&&i| i == SEP_ID).count(), 1);
        for (i, m) in seq.attention_mask.iter().enumerate() {
            prop_assert_eq!(*m == 1, seq.ids[i] != PAD_ID);
        }
        prop_assert_eq!(decode(&seq, &vocab), words);
    }

    #[test]
    fn vocab_ids_are_contiguous(words in prop::collection::vec("[a-z]{1,3}", 1..200), cap in 1usize..50) {
        let corpus = Corpus::new(vec![doc_from(&words, Label::Accepted)]).unwrap();
        let vocab = build_vocab(&corpus, cap, 1).unwrap();
        prop_assert!(vocab.len() <= cap + RESERVED_TOKENS.len());
        for (i, t) in vocab.tokens().iter().enumerate().skip(RESERVED_TOKENS.len()) {
            prop_assert_eq!(vocab.id(t), i as u32);
            prop_assert!(!RESERVED_TOKENS.contains(&t.as_str()));
        }
    }
}

#[test]
fn vocabulary_ignores_test_documents() {
    let docs = vec![
        Document {
            id: "a".into(),
            text: "court court order".into(),
            label: Label::Accepted,
            split: Split::Train,
        },
        Document {
            id: "b".into(),
            text: "secret secret secret".into(),
            label: Label::Rejected,
            split: Split::Test,
        },
    ];
    let vocab = build_vocab(&Corpus::new(docs).unwrap(), 100, 1).unwrap();
    assert!(vocab.contains("court"));
    assert!(!vocab.contains("secret"));
    assert_eq!(vocab.id("secret"), UNK_ID);
}

#[test]
fn synthetic_corpus_file_round_trip() {
    let spec = SyntheticSpec {
        train_docs: 10,
        validation_docs: 4,
        test_docs: 4,
        words_per_doc: 120,
        ..SyntheticSpec::default()
    };
    let text = write_corpus_jsonl(&generate_synthetic(&spec).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    std::fs::write(&path, &text).unwrap();
    let corpus = load_corpus(&path).unwrap();
    assert_eq!(corpus.len(), 18);
    assert_eq!(write_corpus_jsonl(&corpus.documents), text);
    let params = ChunkingParams { chunk_len: 50, overlap: 10 };
    let a: Vec<Vec<Chunk>> = corpus.documents.iter().map(|d| chunk_document(d, params).unwrap()).collect();
    let b: Vec<Vec<Chunk>> = load_corpus(&path).unwrap().documents.iter().map(|d| chunk_document(d, params).unwrap()).collect();
    assert_eq!(a, b);
}
