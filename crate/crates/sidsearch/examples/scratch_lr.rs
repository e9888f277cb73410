use sidsearch::cli::build_trie;
use sidsearch::config::RunConfig;
use sidsearch::eval::{build_splits, evaluate};
use sidsearch::model::{CodebookMode, ModelParams};
use sidsearch::num::ParamStore;
use sidsearch::pretrain::{run_pretrain, PretrainConfig, SidIndex};
use sidsearch::sim::generate_corpus;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(42);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);

    let mut config = RunConfig::default();
    config.seed = seed;
    config.pretrain.steps = steps;
    config.eval.probe_limit = 0;
    let corpus = generate_corpus(&config.corpus_config()).unwrap();
    let dims = config.model_dims();

    for (name, residual, cf, mode) in [
        ("full   ", true, true, CodebookMode::SimVq),
        ("rcl    ", true, false, CodebookMode::SimVq),
        ("cf     ", false, true, CodebookMode::SimVq),
        ("plain  ", false, false, CodebookMode::SimVq),
        ("direct ", true, true, CodebookMode::Direct),
    ] {
        let t0 = std::time::Instant::now();
        let mut store = ParamStore::new();
        let params = ModelParams::register(&mut store, dims, mode, config.seed);
        let pcfg = PretrainConfig {
            residual_accumulation: residual,
            coarse_to_fine: cf,
            ..config.pretrain.clone()
        };
        let rows = run_pretrain(&mut store, &params, &corpus, &pcfg, config.seed, |_| {}).unwrap();
        let first: f64 = rows[..10].iter().map(|r| r.report.l_total).sum::<f64>() / 10.0;
        let last: f64 = rows[rows.len() - 10..].iter().map(|r| r.report.l_total).sum::<f64>() / 10.0;

        let index = SidIndex::build(&store, &params, &corpus).unwrap();
        let ppl = sidsearch::codebook::utilization(&index.paths, dims.w).unwrap();
        let trie = build_trie(&store, &params, &corpus).unwrap();

        let (rk, ck) = build_splits(&corpus, &config.reward, config.eval.top_m, config.seed);
        let ev_rk = evaluate(&store, &params, &trie, &corpus, &rk, 50, config.decode.beam_size, config.decode.top_n, true).unwrap();
        let ev_ck = evaluate(&store, &params, &trie, &corpus, &ck, 50, config.decode.beam_size, config.decode.top_n, true).unwrap();
        let ev_un = evaluate(&store, &params, &trie, &corpus, &rk, 50, config.decode.beam_size, config.decode.top_n, false).unwrap();
        println!(
            "{name} loss {first:6.2}->{last:6.2} ppl1={:5.1} paths={:4} | RK r@50={:.3} mrr={:.3} | CK r@50={:.3} mrr={:.3} | uncon_valid={:.3} | {:?}",
            ppl[0], trie.path_count(),
            ev_rk.overall.recall_at_k, ev_rk.overall.mrr,
            ev_ck.overall.recall_at_k, ev_ck.overall.mrr,
            ev_un.overall.valid_rate,
            t0.elapsed()
        );
    }
}
