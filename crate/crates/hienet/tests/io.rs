use hienet::checkpoint::{self, Checkpoint};
use hienet::io;
use hienet::Error;
use hienet_core::model::{HieNet, ModelConfig};
use hienet_core::synth::{generate, GenConfig};
use hienet_core::trainer::{examples, init_model};

fn small() -> (hienet_core::synth::Corpus, HieNet) {
    let corpus = generate(&GenConfig {
        seed: 3,
        num_codes: 15,
        train_docs: 30,
        val_docs: 5,
        test_docs: 5,
        ..GenConfig::default()
    })
    .unwrap();
    let train = examples(&corpus.tree, &corpus.train).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.encoder.d_c = 6;
    let model = init_model(9, cfg, corpus.tree.clone(), corpus.vocab_size, &train).unwrap();
    (corpus, model)
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (corpus, model) = small();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.json");
    checkpoint::save(&p, &model).unwrap();
    let back = checkpoint::load(&p).unwrap();
    assert_eq!(back.cfg, model.cfg);
    for ((na, ta), (nb, tb)) in model.params.named().into_iter().zip(back.params.named()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb, "{na}");
    }
    for doc in &corpus.test {
        let a = model.predict(&doc.tokens, None).unwrap();
        let b = back.predict(&doc.tokens, None).unwrap();
        assert_eq!(a.probs, b.probs);
    }
    // Saving the reloaded model reproduces the file byte for byte.
    let q = dir.path().join("ck2.json");
    checkpoint::save(&q, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn checkpoint_rejects_bad_shapes_and_versions() {
    let (_, model) = small();
    let mut ck = Checkpoint::from_model(&model);
    ck.tensors[1].rows += 1;
    assert!(matches!(ck.into_model(), Err(Error::Checkpoint(_))));

    let mut ck = Checkpoint::from_model(&model);
    ck.version = 99;
    assert!(matches!(ck.into_model(), Err(Error::Checkpoint(_))));

    let mut ck = Checkpoint::from_model(&model);
    ck.tensors.pop();
    assert!(matches!(ck.into_model(), Err(Error::Checkpoint(_))));

    let mut ck = Checkpoint::from_model(&model);
    ck.tensors.swap(0, 1);
    assert!(matches!(ck.into_model(), Err(Error::Checkpoint(_))));
}

#[test]
fn corpus_files_round_trip() {
    let (corpus, _) = small();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("train.jsonl");
    io::write_dataset(&d, &corpus.train).unwrap();
    assert_eq!(io::read_dataset(&d).unwrap(), corpus.train);

    let t = dir.path().join("tree.json");
    io::write_tree(&t, &corpus.tree).unwrap();
    assert_eq!(io::read_tree(&t).unwrap(), corpus.tree);

    let c = dir.path().join("codes.tsv");
    std::fs::write(&c, io::format_codes(&corpus.codes)).unwrap();
    assert_eq!(io::read_codes(&c).unwrap(), corpus.codes);
}

#[test]
fn empty_dataset_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("empty.jsonl");
    std::fs::write(&d, "").unwrap();
    assert!(io::read_dataset(&d).unwrap().is_empty());
}

#[test]
fn dataset_errors_carry_line_numbers() {
    let text = "{\"doc_id\": \"a\", \"tokens\": [1, 2], \"labels\": [\"100\"]}\n{\"doc_id\": 7, \"tokens\": [1], \"labels\": \n";
    match io::parse_dataset(text, std::path::Path::new("x.jsonl")) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
