// quick probe: dump h^q for all real train queries + labels
use smar::data::records::Corpus;
use smar::data::vocab::{build_vocab, tokenize_tight};
use smar::training::checkpoint::Checkpoint;

fn main() {
    let corpus = Corpus::load(std::path::Path::new("/tmp/desk-corpus")).unwrap();
    let vocab = build_vocab(corpus.vocab_texts(), 1).unwrap();
    let ckpt = Checkpoint::load(std::path::Path::new("/tmp/desk-smar-fine8/finetuned.ckpt")).unwrap();
    let model = ckpt.to_model().unwrap();
    let labels = corpus.query_fashion_labels();
    let mut out = String::new();
    for q in corpus.queries.iter().filter(|q| !q.synthetic && q.query_id.starts_with("trainq")) {
        let tok = tokenize_tight(&q.text, &vocab, model.config.query.max_seq_len).unwrap();
        let (pooled, _) = model.encode_query(&tok).unwrap();
        let label = labels[&q.query_id];
        out.push_str(&format!("{}\t{}\t{}\n", label as u8,
            pooled.data().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","), q.text));
    }
    std::fs::write("/tmp/hq.tsv", out).unwrap();
}
