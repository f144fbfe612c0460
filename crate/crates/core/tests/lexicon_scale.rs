use cws_core::lexicon::{merge, Lexicon};

/// The `n`-th word of a source: a per-source prefix character followed by
/// three base-100 digits drawn from a per-source block.
fn word(source: u32, n: u32) -> String {
    let base = 0x4E00 + source * 100;
    let digits = [n % 100, (n / 100) % 100, (n / 10_000) % 100];
    std::iter::once(char::from_u32(0x9000 + source).unwrap())
        .chain(digits.iter().map(|d| char::from_u32(base + d).unwrap()))
        .collect()
}

fn source(id: u32, size: u32) -> Lexicon {
    (0..size).map(|n| word(id, n)).collect::<Vec<_>>().iter().map(String::as_str).collect()
}

#[test]
fn vocabulary_of_table_sizes_totals_850k() {
    let sizes = [
        ("Medicine", 447_000),
        ("Location", 117_000),
        ("Name", 105_000),
        ("Idiom", 50_000),
        ("Organization", 31_000),
        ("Training", 100_000),
    ];
    let lexicons: Vec<Lexicon> = sizes
        .iter()
        .enumerate()
        .map(|(i, &(_, size))| source(i as u32, size))
        .collect();
    for (lex, &(_, size)) in lexicons.iter().zip(&sizes) {
        assert_eq!(lex.len(), size as usize);
    }
    let named: Vec<(&str, &Lexicon)> = sizes.iter().map(|&(name, _)| name).zip(&lexicons).collect();
    let (merged, stats) = merge(&named);
    assert_eq!(stats.raw_total(), 850_000);
    assert_eq!(stats.total, 850_000);
    assert_eq!(merged.len(), 850_000);
    assert_eq!(merged.max_len(), 4);
    assert_eq!(stats.sources[0].name, "Medicine");
    assert_eq!(stats.sources[0].words, 447_000);

    // overlapping sources: the deduplicated total drops, the raw one does not
    let overlap = source(0, 1_000);
    let (_, stats) = merge(&[("Medicine", &lexicons[0]), ("Again", &overlap)]);
    assert_eq!(stats.raw_total(), 448_000);
    assert_eq!(stats.total, 447_000);
}
