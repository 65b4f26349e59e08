// Scratch calibration harness: runs the S1 pipeline and prints metric
// levels and stage timings. Not part of the test suite.

use idp_cli::{Pipeline, RunConfig, Stage};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = tempfile::tempdir()?;
    let outdir = dir.path().join("run");
    let mut table = toml::Table::new();
    let mut run = toml::Table::new();
    run.insert("seed".into(), toml::Value::Integer(42));
    run.insert(
        "outdir".into(),
        toml::Value::String(outdir.to_str().unwrap().to_string()),
    );
    table.insert("run".into(), toml::Value::Table(run));
    let args: Vec<String> = std::env::args().collect();
    let epochs: i64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(25);
    let batch: i64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(256);
    let dim: i64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let mut seq = toml::Table::new();
    seq.insert("dim".into(), toml::Value::Integer(dim));
    seq.insert("max_len".into(), toml::Value::Integer(20));
    seq.insert("max_epochs".into(), toml::Value::Integer(epochs));
    seq.insert("batch_size".into(), toml::Value::Integer(batch));
    table.insert("seqmodel".into(), toml::Value::Table(seq));
    let mut cdim = toml::Table::new();
    cdim.insert("max_epochs".into(), toml::Value::Integer(30));
    table.insert("cdim".into(), toml::Value::Table(cdim));
    let mut transfer = toml::Table::new();
    transfer.insert("mode".into(), toml::Value::String("zero-shot".into()));
    table.insert("transfer".into(), toml::Value::Table(transfer));

    let cfg = RunConfig::from_table(table)?;
    let pipeline = Pipeline::new(cfg);
    let t0 = std::time::Instant::now();
    pipeline.run_stage(Stage::Synth)?;
    println!("synth: {:.1}s", t0.elapsed().as_secs_f64());
    for stage in Stage::DAG {
        let t = std::time::Instant::now();
        pipeline.run_stage(stage)?;
        println!("{}: {:.1}s", stage.name(), t.elapsed().as_secs_f64());
    }
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
    println!("--- pretrain report ---");
    print!("{}", std::fs::read_to_string(pipeline.pretrain_report())?);
    println!("--- zero-shot eval report ---");
    print!("{}", std::fs::read_to_string(pipeline.eval_report())?);
    Ok(())
}
