use std::path::Path;

use jigsaw_core::cost_model::CostModel;
use jigsaw_core::error::Error;
use jigsaw_core::trace::{
    generate, load, load_records, parse_range, parse_records, save, GenConfig, HEADER,
};

#[test]
fn save_and_load_round_trip() {
    let cost = CostModel::builtin();
    let recs = generate(
        9,
        &GenConfig {
            n_jobs: 300,
            ..GenConfig::default()
        },
        &cost,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    save(&path, &recs).unwrap();
    assert_eq!(load_records(&path).unwrap(), recs);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), HEADER.join(","));
    assert_eq!(load(&path, &cost).unwrap().len(), 300);
}

#[test]
fn worker_mix_matches_configuration() {
    let gen = GenConfig {
        n_jobs: 100_000,
        ..GenConfig::default()
    };
    let recs = generate(1, &gen, &CostModel::builtin()).unwrap();
    for &(w, p) in &gen.worker_mix {
        let frac = recs.iter().filter(|r| r.num_workers == w).count() as f64 / recs.len() as f64;
        assert!((frac - p).abs() <= 0.01, "{w} workers: {frac} vs {p}");
    }
    let (lo, hi) = gen.iters_range;
    assert!(recs.iter().all(|r| (lo..=hi).contains(&r.iterations)));
}

#[test]
fn interarrival_mean_matches_configuration() {
    let gen = GenConfig {
        n_jobs: 10_000,
        mean_interarrival_s: 30.0,
        ..GenConfig::default()
    };
    let recs = generate(2, &gen, &CostModel::builtin()).unwrap();
    assert_eq!(recs[0].arrival_s, 0.0);
    let mean = recs.last().unwrap().arrival_s / (recs.len() - 1) as f64;
    assert!((mean / 30.0 - 1.0).abs() <= 0.05, "{mean}");
    assert!(recs.windows(2).all(|w| w[0].arrival_s <= w[1].arrival_s));
}

#[test]
fn generation_is_seeded() {
    let cost = CostModel::builtin();
    let gen = GenConfig {
        n_jobs: 200,
        ..GenConfig::default()
    };
    assert_eq!(
        generate(3, &gen, &cost).unwrap(),
        generate(3, &gen, &cost).unwrap()
    );
    assert_ne!(
        generate(3, &gen, &cost).unwrap(),
        generate(4, &gen, &cost).unwrap()
    );
}

#[test]
fn row_becomes_suffix_dag() {
    let text = format!("{}\n7,1.5,ResNet50,8,120,true\n", HEADER.join(","));
    let recs = parse_records(&text, Path::new("t.csv")).unwrap();
    let dag = recs[0].to_dag().unwrap();
    assert_eq!(
        dag.fractions,
        vec![0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0]
    );
    assert_eq!(recs[0].arrival(), 1_500_000);
    let text = format!("{}\n7,1.5,ResNet50,8,120,false\n", HEADER.join(","));
    let dag = parse_records(&text, Path::new("t.csv")).unwrap()[0]
        .to_dag()
        .unwrap();
    assert_eq!(dag.fractions, vec![1.0; 8]);
}

fn parse_line(text: &str) -> usize {
    match parse_records(text, Path::new("t.csv")) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn malformed_input_names_the_line() {
    let h = HEADER.join(",");
    assert_eq!(parse_line("id,arrival\n1,2\n"), 1);
    assert_eq!(
        parse_line(&format!(
            "{h}\n1,0,ResNet50,4,10,true\n2,x,ResNet50,4,10,true\n"
        )),
        3
    );
    assert_eq!(parse_line(&format!("{h}\n1,0,ResNet50,4,0,true\n")), 2);
    assert_eq!(
        parse_line(&format!(
            "{h}\n1,5,ResNet50,4,1,true\n2,4,ResNet50,4,1,true\n"
        )),
        3
    );
    assert_eq!(parse_line(&format!("{h}\n1,0,ResNet50,4,1\n")), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    std::fs::write(
        &path,
        format!("{h}\n1,0,ResNet50,4,1,true\n\n2,1,NoSuchNet,4,1,true\n"),
    )
    .unwrap();
    match load(&path, &CostModel::builtin()) {
        Err(Error::Parse { line: 4, msg, .. }) => assert!(msg.contains("NoSuchNet")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_file_is_an_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::write(&path, "").unwrap();
    assert!(load(&path, &CostModel::builtin()).unwrap().is_empty());
}

#[test]
fn settings_are_parsed() {
    let mut gen = GenConfig::default();
    gen.set("n", "12").unwrap();
    gen.set("mix", "1:0.5/16:0.5").unwrap();
    gen.set("iters", "10-20").unwrap();
    gen.set("models", "ResNet50/VGG16").unwrap();
    assert_eq!(gen.n_jobs, 12);
    assert_eq!(gen.worker_mix, vec![(1, 0.5), (16, 0.5)]);
    assert_eq!(gen.iters_range, (10, 20));
    assert!(gen.set("colour", "red").is_err());
    assert!(GenConfig {
        worker_mix: vec![(3, 1.0)],
        ..GenConfig::default()
    }
    .validate()
    .is_err());
    assert_eq!(parse_range("7").unwrap(), (7, 7));
    assert!(parse_range("9-3").is_err());
}
