use attention_lens::analysis::{evaluate_lenses, inspect_head, transfer_matrix};
use attention_lens::corpus::{synthetic, Corpus, Tokenizer};
use attention_lens::lens::BaselineMode;
use attention_lens::model::{load_model, pretrain_base_model, save_model, ModelConfig};
use attention_lens::trainer::{load_checkpoint_for, save_checkpoint, train_layer_group, LensTrainer, TrainConfig};

fn setup() -> (Tokenizer, Corpus, ModelConfig) {
    let text = synthetic::book_text(3, 20_000);
    let tok = Tokenizer::build(&[&text], 300).unwrap();
    let corpus = Corpus::from_text("book", &text, &tok).unwrap();
    let cfg = ModelConfig::new(2, 2, 16, tok.vocab_size(), 32).unwrap();
    (tok, corpus, cfg)
}

fn small_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        seq_len: 16,
        checkpoint_every: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn pretrain_train_and_analyse() {
    let (tok, corpus, cfg) = setup();
    let model = pretrain_base_model(cfg, &corpus, 30, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(&model, &dir.path().join("m.bin")).unwrap();
    let model = load_model(&dir.path().join("m.bin")).unwrap();

    let outcomes = train_layer_group(&model, 1, &[0, 1], &corpus, &small_train(20)).unwrap();
    assert_eq!(outcomes.len(), 2);
    for o in &outcomes {
        assert_eq!(o.step_losses.len(), 20);
        assert_eq!(o.history.len(), 4);
        assert!(o.step_losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    }
    let lenses: Vec<_> = outcomes.into_iter().map(|o| o.lens).collect();
    let windows = corpus.heldout_windows(16, 10, 0).unwrap();
    let eval = evaluate_lenses(&model, &lenses, &windows, BaselineMode::FinalLayerNorm).unwrap();
    assert_eq!(eval.heads.len(), 2);
    let transfer = transfer_matrix(&model, &lenses, &windows).unwrap();
    assert_eq!(transfer.entries.len(), 4);
    let r = inspect_head(&model, &tok, &lenses[0], "the cat", None, 7, BaselineMode::RawUnembedding).unwrap();
    assert_eq!(r.lens.entries.len(), 7);
    assert_eq!(r.baseline.entries.len(), 7);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let (_, corpus, cfg) = setup();
    let model = pretrain_base_model(cfg, &corpus, 10, 1).unwrap();
    let full = LensTrainer::new(&model, 0, 1, &corpus, &small_train(12)).unwrap().run().unwrap();
    let again = LensTrainer::new(&model, 0, 1, &corpus, &small_train(12)).unwrap().run().unwrap();
    assert_eq!(full.lens.matrix(), again.lens.matrix());

    let mut first = LensTrainer::new(&model, 0, 1, &corpus, &small_train(7)).unwrap();
    while !first.is_done() {
        first.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    let ckpt = load_checkpoint_for(&path, &model).unwrap();
    let resumed = LensTrainer::resume(&model, &corpus, ckpt, 12).unwrap().run().unwrap();
    assert_eq!(resumed.lens.matrix(), full.lens.matrix());
    assert_eq!(resumed.history, full.history);

    let other = pretrain_base_model(cfg, &corpus, 10, 2).unwrap();
    assert!(load_checkpoint_for(&path, &other).is_err());
}
