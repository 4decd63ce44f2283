use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::engine::{Engine, GenerationRecord, INVERSE_CKPT};
use super::workdir::{Workdir, GENERATIONS, PAIRS, QUADS, QUERY_INDEX, RESPONSE_INDEX, SKELETONS, VOCAB};
use super::CliError;
use crate::config::RunConfig;
use crate::dataset::{
    build_quadruples, load_pairs, make_proxy_skeleton, DatasetError, DialoguePair, IndexSide, InvertedIndex,
    LabeledQuad, QuadOptions, Quadruple,
};
use crate::eval::{
    copy_rate_report, dist_n, dist_n_without_query, similarity_buckets, skeleton_metrics, EvalError, EvalReport,
    DEFAULT_EDGES,
};
use crate::jsonl;
use crate::model::{Components, DecodeOptions, Integration, ModelSet, Strategy, Usage};
use crate::text::{tokenize, StopList, TokenSeq, Vocab};
use crate::training::{save_checkpoint, train_cascade, train_critic, train_mle, CriticExample, Example, Mode, StepLog};

pub(super) struct Stages<'a> {
    pub cfg: &'a RunConfig,
    pub work: &'a Workdir,
}

pub(super) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub(super) fn checkpoint_name(mode: Mode) -> String {
    format!("{}.ckpt", mode.as_str())
}

/// Opens a step log, replacing any log left by an earlier run of the stage.
struct StepWriter {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl StepWriter {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self { path, out: BufWriter::new(f), error: None })
    }

    fn write(&mut self, s: &StepLog) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(s).expect("step log serializes");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }

    fn finish(mut self) -> Result<(), CliError> {
        if let Some(e) = self.error.take() {
            return Err(CliError::io(&self.path, e));
        }
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

impl Stages<'_> {
    fn lowercase(&self) -> bool {
        self.cfg.data.lowercase
    }

    fn stoplist(&self) -> Result<(StopList, Vec<PathBuf>), CliError> {
        match &self.cfg.paths.stoplist {
            Some(p) => {
                let s = StopList::load(p, self.lowercase())
                    .map_err(|e| CliError::Config(format!("stop list {}: {e}", p.display())))?;
                Ok((s, vec![p.clone()]))
            }
            None => Ok((StopList::default(), vec![])),
        }
    }

    fn load_input_pairs(&self, path: &Path) -> Result<Vec<DialoguePair>, CliError> {
        match load_pairs(path, self.lowercase()) {
            Ok(c) => Ok(c.pairs),
            Err(DatasetError::Io { path, source }) => Err(CliError::Config(format!("{}: {source}", path.display()))),
            Err(e) => Err(CliError::Run(format!("{}: {e}", path.display()))),
        }
    }

    fn vocab(&self) -> Result<(Vocab, PathBuf), CliError> {
        let p = self.work.require(VOCAB, "s2r index")?;
        Ok((read_json(&p)?, p))
    }

    pub fn index(&self) -> Result<(), CliError> {
        let corpus = &self.cfg.paths.corpus;
        let pairs = self.load_input_pairs(corpus)?;
        let vocab = Vocab::build(
            pairs.iter().flat_map(|p| [p.query.as_slice(), p.response.as_slice()]),
            self.cfg.data.vocab_size,
            self.cfg.data.min_freq,
        );
        let by_response = InvertedIndex::build(&pairs, IndexSide::Response)?;
        let by_query = InvertedIndex::build(&pairs, IndexSide::Query)?;
        jsonl::write(&self.work.path(PAIRS), &pairs)?;
        write_json(&self.work.path(VOCAB), &vocab)?;
        write_json(&self.work.path(RESPONSE_INDEX), &by_response)?;
        write_json(&self.work.path(QUERY_INDEX), &by_query)?;
        self.work.record("index", &[PAIRS, VOCAB, RESPONSE_INDEX, QUERY_INDEX], std::slice::from_ref(corpus))?;
        log::info!("indexed {} pairs, vocabulary {}", pairs.len(), vocab.len());
        Ok(())
    }

    pub fn quads(&self) -> Result<(), CliError> {
        let pairs_path = self.work.require(PAIRS, "s2r index")?;
        let index_path = self.work.require(RESPONSE_INDEX, "s2r index")?;
        let pairs: Vec<DialoguePair> = jsonl::read(&pairs_path)?;
        let index: InvertedIndex = read_json(&index_path)?;
        let (stop, mut inputs) = self.stoplist()?;
        let r = &self.cfg.retrieval;
        let opts = QuadOptions {
            k: r.k,
            lo: r.lo,
            hi: r.hi,
            jaccard_stoplist: r.filter_stopwords.then_some(stop),
            max_quads: r.max_quads,
            seed: self.cfg.training.seed,
        };
        let quads = build_quadruples(&pairs, &index, &opts);
        if quads.is_empty() {
            log::warn!("no retrieved candidate fell inside the band [{}, {}]; wrote an empty {QUADS}", r.lo, r.hi);
        }
        jsonl::write(&self.work.path(QUADS), &quads)?;
        inputs.splice(0..0, [pairs_path, index_path]);
        self.work.record("quads", &[QUADS], &inputs)?;
        log::info!("{} quadruples", quads.len());
        Ok(())
    }

    pub fn skeletons(&self) -> Result<(), CliError> {
        let quads_path = self.work.require(QUADS, "s2r quads")?;
        let quads: Vec<Quadruple> = jsonl::read(&quads_path)?;
        let (stop, mut inputs) = self.stoplist()?;
        let labeled: Vec<LabeledQuad> = quads.into_iter().map(|q| q.labeled(&stop)).collect();
        jsonl::write(&self.work.path(SKELETONS), &labeled)?;
        inputs.insert(0, quads_path);
        self.work.record("skeletons", &[SKELETONS], &inputs)?;
        log::info!("labelled {} quadruples", labeled.len());
        Ok(())
    }

    fn labeled_examples(&self, vocab: &Vocab) -> Result<(Vec<LabeledQuad>, Vec<Example>, PathBuf), CliError> {
        let p = self.work.require(SKELETONS, "s2r skeletons")?;
        let labeled: Vec<LabeledQuad> = jsonl::read(&p)?;
        let examples = labeled.iter().map(|lq| Example::from_quad(vocab, lq)).collect::<Result<Vec<_>, _>>()?;
        Ok((labeled, examples, p))
    }

    fn new_models(&self, vocab: Vocab, integration: Integration, components: Components) -> Result<ModelSet, CliError> {
        Ok(ModelSet::new(self.cfg.model_config(), vocab, integration, components, self.cfg.training.seed)?)
    }

    pub fn train(&self, mode: Mode, inverse: bool, epochs: Option<usize>) -> Result<(), CliError> {
        if inverse && mode != Mode::ResMle {
            return Err(CliError::Config("--inverse only applies to --mode res-mle".into()));
        }
        let mut tc = self.cfg.train_config(mode);
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        tc.validate()?;
        // check checkpoint prerequisites before touching any data
        if mode == Mode::Cascade {
            for (m, remedy) in [
                (Mode::SkeMle, "s2r train --mode ske-mle"),
                (Mode::ResMle, "s2r train --mode res-mle"),
                (Mode::Critic, "s2r train --mode critic"),
            ] {
                self.work.require(&checkpoint_name(m), remedy)?;
            }
        }
        if mode == Mode::Critic {
            self.work.require(&checkpoint_name(Mode::ResMle), "s2r train --mode res-mle")?;
        }
        let (vocab, vocab_path) = self.vocab()?;
        let (ckpt, kind, log_name) = if inverse {
            (INVERSE_CKPT.to_owned(), "inverse", "train.inverse.jsonl".to_owned())
        } else {
            (checkpoint_name(mode), mode.as_str(), format!("train.{}.jsonl", mode.as_str()))
        };
        let mut log = StepWriter::create(self.work.path(&log_name))?;
        let mut inputs = vec![vocab_path];
        let both = Components { skeleton: true, response: true, critic: false };
        let response_only = Components { skeleton: false, response: true, critic: false };

        let mut models = match mode {
            Mode::ResMle if inverse => {
                let p = self.work.require(PAIRS, "s2r index")?;
                let pairs: Vec<DialoguePair> = jsonl::read(&p)?;
                inputs.push(p);
                let examples: Vec<Example> = pairs.iter().map(|pair| Example::inverse(&vocab, pair)).collect();
                let mut m = self.new_models(vocab, Integration::Pipeline, response_only)?;
                let losses = train_mle(&mut m, &examples, &tc, &mut |s| log.write(s), None)?;
                log::info!("final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
                m
            }
            Mode::SkeMle | Mode::ResMle | Mode::Joint => {
                let (_, examples, p) = self.labeled_examples(&vocab)?;
                inputs.push(p);
                let (integration, components) = match mode {
                    Mode::SkeMle => {
                        (Integration::Pipeline, Components { skeleton: true, response: false, critic: false })
                    }
                    Mode::ResMle => (Integration::Pipeline, response_only),
                    _ => (Integration::Joint, both),
                };
                let mut m = self.new_models(vocab, integration, components)?;
                let losses = train_mle(&mut m, &examples, &tc, &mut |s| log.write(s), None)?;
                log::info!("final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
                m
            }
            Mode::Critic => {
                let (labeled, _, p) = self.labeled_examples(&vocab)?;
                inputs.push(p);
                let ske_path = self.work.path(&checkpoint_name(Mode::SkeMle));
                let has_ske = ske_path.is_file();
                let mut m = self.new_models(
                    vocab.clone(),
                    Integration::Pipeline,
                    Components { skeleton: has_ske, response: true, critic: true },
                )?;
                let res_path = self.work.path(&checkpoint_name(Mode::ResMle));
                m.merge_checkpoint(&res_path, &["res."])?;
                inputs.push(res_path);
                if has_ske {
                    m.merge_checkpoint(&ske_path, &["ske."])?;
                    inputs.push(ske_path);
                }
                let opts = DecodeOptions {
                    strategy: Strategy::Greedy,
                    max_len: tc.max_len,
                    usage: Usage::Single,
                    ..self.cfg.decode_options()
                };
                let mut data = Vec::with_capacity(labeled.len());
                for lq in &labeled {
                    let q = &lq.quad;
                    let gen = m.respond(&q.q, &[(q.rq.clone(), q.rr.clone())], &opts, None)?;
                    data.push(CriticExample {
                        q: vocab.encode(&q.q),
                        generated: vocab.encode(&gen.response),
                        gold: vocab.encode(&q.r),
                    });
                }
                let rep = train_critic(&mut m, &data, &tc, &mut |s| log.write(s))?;
                log::info!("critic held-out pick accuracy {:.3} on {}", rep.heldout_accuracy, rep.heldout_size);
                m
            }
            Mode::Cascade => {
                let (_, examples, p) = self.labeled_examples(&vocab)?;
                inputs.push(p);
                let mut m = self.new_models(
                    vocab,
                    Integration::Pipeline,
                    Components { skeleton: true, response: true, critic: true },
                )?;
                for (stage, prefix) in [(Mode::SkeMle, "ske."), (Mode::ResMle, "res."), (Mode::Critic, "critic.")] {
                    let path = self.work.path(&checkpoint_name(stage));
                    m.merge_checkpoint(&path, &[prefix])?;
                    inputs.push(path);
                }
                let rep = train_cascade(&mut m, &examples, &tc, &mut |s| log.write(s))?;
                if let (Some(first), Some(last)) = (rep.epoch_rewards.first(), rep.epoch_rewards.last()) {
                    log::info!("mean reward {first:.4} -> {last:.4}");
                }
                m
            }
        };
        log.finish()?;
        save_checkpoint(&mut models, kind, &self.work.path(&ckpt))?;
        self.work.record(&format!("train.{kind}"), &[&ckpt, &log_name], &inputs)?;
        Ok(())
    }

    pub fn generate(&self, input: Option<PathBuf>, checkpoint: Option<PathBuf>, mmi: bool) -> Result<(), CliError> {
        let input = input
            .or_else(|| self.cfg.paths.test.clone())
            .ok_or_else(|| CliError::Config("no test queries: set paths.test or pass --input".into()))?;
        let engine = Engine::open(self.cfg.clone(), checkpoint, mmi)?;
        let tests = self.load_input_pairs(&input)?;
        let mut records = Vec::with_capacity(tests.len());
        let mut unmatched = 0;
        for t in &tests {
            match engine.respond_tokens(&t.query, Some(&t.response))? {
                Some(r) => records.push(r),
                None => unmatched += 1,
            }
        }
        if unmatched > 0 {
            log::warn!("{unmatched} queries share no token with the indexed queries and were skipped");
        }
        jsonl::write(&self.work.path(GENERATIONS), &records)?;
        let mut inputs = vec![input];
        inputs.extend(engine.sources().iter().cloned());
        self.work.record("generate", &[GENERATIONS], &inputs)?;
        log::info!("generated {} responses", records.len());
        Ok(())
    }

    pub fn chat(
        &self,
        checkpoint: Option<PathBuf>,
        input: &mut dyn BufRead,
        out: &mut dyn Write,
    ) -> Result<(), CliError> {
        let engine = Engine::open(self.cfg.clone(), checkpoint, false)?;
        let io = |e| CliError::Run(format!("chat: {e}"));
        writeln!(out, "type a query; an empty line or :q quits").map_err(io)?;
        let mut line = String::new();
        loop {
            write!(out, "> ").map_err(io)?;
            out.flush().map_err(io)?;
            line.clear();
            if input.read_line(&mut line).map_err(io)? == 0 {
                break;
            }
            let text = line.trim();
            if text.is_empty() || text == ":q" {
                break;
            }
            match engine.respond(text)? {
                None => writeln!(out, "no similar query in the index").map_err(io)?,
                Some(r) => {
                    writeln!(out, "retrieved: {} => {}", r.rq, r.rr).map_err(io)?;
                    writeln!(out, "skeleton:  {}", r.skeleton).map_err(io)?;
                    writeln!(out, "response:  {}", r.response).map_err(io)?;
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, input: Option<PathBuf>) -> Result<(), CliError> {
        let path = match input {
            Some(p) if p.is_file() => p,
            Some(p) => return Err(CliError::Missing(format!("{} not found", p.display()))),
            None => self.work.require(GENERATIONS, "s2r generate")?,
        };
        let records: Vec<GenerationRecord> = jsonl::read(&path)?;
        let (stop, _) = self.stoplist()?;
        let report = build_report(&records, &stop)?;
        let text = report.to_text();
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        for (name, body) in [("eval.json", &json), ("eval.txt", &text), ("eval.csv", &report.to_csv())] {
            let p = self.work.path(name);
            std::fs::write(&p, body).map_err(|e| CliError::io(&p, e))?;
        }
        self.work.record("eval", &["eval.json", "eval.txt", "eval.csv"], &[path])?;
        print!("{text}");
        Ok(())
    }
}

/// Evaluation report over generation records. Skeleton metrics need a gold
/// response on every record.
pub fn build_report(records: &[GenerationRecord], stop: &StopList) -> Result<EvalReport, CliError> {
    let tok = |s: &str| tokenize(s, false);
    let responses: Vec<TokenSeq> = records.iter().map(|r| tok(&r.response)).collect();
    let queries: Vec<TokenSeq> = records.iter().map(|r| tok(&r.q)).collect();
    let retrieved: Vec<TokenSeq> = records.iter().map(|r| tok(&r.rr)).collect();
    let sims: Vec<f64> = records.iter().map(|r| r.similarity).collect();
    let skeleton = if !records.is_empty() && records.iter().all(|r| r.r.is_some()) {
        let proxy: Vec<Vec<u8>> = records
            .iter()
            .zip(&retrieved)
            .map(|(r, rr)| make_proxy_skeleton(&tok(r.r.as_deref().unwrap_or_default()), rr, stop).labels)
            .collect();
        let predicted: Vec<Vec<u8>> = records.iter().map(|r| r.m.clone()).collect();
        Some(skeleton_metrics(&predicted, &proxy)?)
    } else {
        None
    };
    // every response token occurring in its query leaves nothing to count
    let without_query = |n| match dist_n_without_query(&responses, &queries, n) {
        Err(EvalError::NoTokens) => Ok(0.0),
        other => other,
    };
    let logprobs: Vec<(f64, f64)> = records.iter().map(|r| (r.similarity, r.normalized)).collect();
    Ok(EvalReport {
        responses: records.len(),
        dist1: dist_n(&responses, 1)?,
        dist2: dist_n(&responses, 2)?,
        dist1_without_query: without_query(1)?,
        dist2_without_query: without_query(2)?,
        skeleton,
        edit_distance_buckets: copy_rate_report(&responses, &retrieved, &sims, &DEFAULT_EDGES)?,
        logprob_buckets: similarity_buckets(&logprobs, &DEFAULT_EDGES),
    })
}
