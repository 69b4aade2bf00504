use std::collections::BTreeSet;

use proptest::prelude::*;

use finrag_core::chunk::{chunk_document, segment_sentences};
use finrag_core::synthetic::topic_paragraph;
use finrag_core::{EngineConfig, HashEmbedder};

fn document(layout: &[(usize, usize)]) -> String {
    layout
        .iter()
        .flat_map(|&(topic, n)| topic_paragraph(topic, n))
        .collect::<Vec<_>>()
        .join(" ")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_sentence_lands_in_a_chunk(
        layout in proptest::collection::vec((0usize..6, 1usize..6), 1..10),
        window in 2usize..10,
        overlap_frac in 0usize..4,
    ) {
        let overlap = (window * overlap_frac / 4).min(window - 1);
        let cfg = EngineConfig { window_size: window, overlap, embed_dim: 128, ..Default::default() };
        let text = document(&layout);
        let emb = HashEmbedder::new(cfg.embed_dim);
        let report = chunk_document("d", &text, &cfg, &emb).unwrap();
        let covered: BTreeSet<usize> = report.chunks.iter().flat_map(|c| c.sentences.iter().copied()).collect();
        prop_assert_eq!(covered, (0..report.sentences.len()).collect::<BTreeSet<_>>());
        prop_assert!(report.merged_tokens <= report.pre_merge_tokens);
        prop_assert!(report.chunks.len() <= report.pre_merge_chunks);
        for c in &report.chunks {
            prop_assert!(c.sentences.windows(2).all(|w| w[0] < w[1]));
            prop_assert!((c.embedding.norm() - 1.0).abs() < 1e-4);
        }
        let ids: BTreeSet<_> = report.chunks.iter().map(|c| c.id.clone()).collect();
        prop_assert_eq!(ids.len(), report.chunks.len());
    }

    #[test]
    fn chunking_is_deterministic(layout in proptest::collection::vec((0usize..4, 1usize..5), 1..8)) {
        let cfg = EngineConfig::default();
        let emb = HashEmbedder::new(cfg.embed_dim);
        let text = document(&layout);
        let a = chunk_document("d", &text, &cfg, &emb).unwrap();
        let b = chunk_document("d", &text, &cfg, &emb).unwrap();
        let contents = |r: &finrag_core::chunk::ChunkingReport| r.chunks.iter().map(|c| c.content.clone()).collect::<Vec<_>>();
        prop_assert_eq!(contents(&a), contents(&b));
    }

    #[test]
    fn decimals_and_abbreviations_do_not_split(a in 1u32..999, b in 0u32..99) {
        let text = format!("Revenue rose to {a}.{b:02} million vs. the prior year, e.g. in Europe. Costs fell.");
        let s = segment_sentences(&text);
        prop_assert_eq!(s.len(), 2);
    }
}
