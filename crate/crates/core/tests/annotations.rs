use tablediff::annotations::{
    extract_structure, generate_toy_table, parse_voc_xml, random_structure, render_mask, write_voc_xml,
    StructureConstraints,
};

fn sweep(c: &StructureConstraints, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let y = random_structure(seed, c).unwrap();
        let img = generate_toy_table(&y, seed ^ 0xabc);
        let got = extract_structure(&img);
        assert_eq!(
            (got.rows.len(), got.columns.len()),
            (y.rows.len(), y.columns.len()),
            "seed {seed}: {y:?} vs {got:?}"
        );
        // Stroke fills narrow bands, so the boxes come back exactly.
        assert_eq!(got, y, "seed {seed}");
    }
}

#[test]
fn toy_roundtrip_desk_constraints() {
    sweep(&StructureConstraints::default(), 0..100);
}

#[test]
fn toy_roundtrip_thin_lines_large_page() {
    let c = StructureConstraints {
        width: 128,
        height: 96,
        rows: [1, 6],
        columns: [0, 6],
        thickness: [2, 6],
        ..Default::default()
    };
    sweep(&c, 100..200);
}

#[test]
fn xml_render_roundtrip() {
    let c = StructureConstraints::default();
    for seed in 0..50 {
        let y = random_structure(seed, &c).unwrap();
        let parsed = parse_voc_xml(write_voc_xml(&y, "t.png").as_bytes()).unwrap().annotation;
        assert_eq!(parsed, y);
        let m = render_mask(&parsed, y.height, y.width);
        let area: u64 = y.rows.iter().chain(&y.columns).map(|b| b.area()).sum();
        let overlap: u64 = y
            .rows
            .iter()
            .flat_map(|r| y.columns.iter().map(move |c| r.height() as u64 * c.width() as u64))
            .sum();
        assert_eq!(m.count_ones() as u64, area - overlap);
    }
}
