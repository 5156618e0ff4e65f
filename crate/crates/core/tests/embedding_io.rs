use proptest::prelude::*;
use refseg_core::{cosine_similarity, EmbeddingTable};

fn table() -> impl Strategy<Value = EmbeddingTable> {
    (1usize..6, 2usize..12).prop_flat_map(|(d, n)| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n).prop_map(move |rows| {
            let tokens = (0..rows.len()).map(|i| format!("tok{i}")).collect();
            EmbeddingTable::from_rows(tokens, rows).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn text_round_trip_keeps_checksum(t in table()) {
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        let back = EmbeddingTable::parse(buf.as_slice()).unwrap();
        prop_assert_eq!(back.checksum(), t.checksum());
        prop_assert_eq!(back.tokens(), t.tokens());
    }

    #[test]
    fn neighbours_match_exhaustive_ranking(t in table(), k in 1usize..4) {
        let k = k.min(t.len() - 1);
        let query = &t.tokens()[0];
        let got = t.nearest_neighbors(query, k).unwrap();
        let mut all: Vec<(String, f64)> = t.tokens()[1..]
            .iter()
            .map(|tok| {
                let s = cosine_similarity(t.lookup(query).unwrap(), t.lookup(tok).unwrap()).unwrap();
                (tok.clone(), s)
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        prop_assert_eq!(got, all[..k].to_vec());
    }
}

#[test]
fn checksum_sees_single_value_changes() {
    let a = EmbeddingTable::parse_str("a 1 2\nb 3 4\n").unwrap();
    let b = EmbeddingTable::parse_str("a 1 2\nb 3 4.000001\n").unwrap();
    assert_ne!(a.checksum(), b.checksum());
}
