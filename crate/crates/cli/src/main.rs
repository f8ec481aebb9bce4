use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::Utc;
use clap::{Parser, Subcommand};
use serde_json::json;

use pem_core::bench::{self, BenchConfig, BenchRow};
use pem_core::index::{self, epoch_seconds, parse_timestamp, LoadedIndex};
use pem_core::sql::{self, Output, QueryContext, ResultSet};
use pem_core::synth::ClusterSpec;
use pem_core::validate::{self, AlgebraicConfig, BehavioralConfig, Fixture};

#[derive(Parser)]
#[command(name = "pem", version, about = "Query-time embedding modulation over SQLite")]
struct Cli {
    /// Emit JSON instead of line-oriented tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest newline-delimited JSON chunk records.
    Index {
        jsonl: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one SQL statement (with vec_ops/keyword) or a stored @preset.
    Query {
        sql: String,
        #[arg(long)]
        db: PathBuf,
        /// Reference time for decay, ISO-8601. Defaults to the current time.
        #[arg(long)]
        now: Option<String>,
    },
    /// Print the orientation preset: schema, counts, functions, presets.
    Orient {
        #[arg(long)]
        db: PathBuf,
    },
    /// Run the algebraic oracle suite, the behavioral suite, or both.
    Validate {
        #[arg(long)]
        algebraic: bool,
        #[arg(long)]
        behavioral: bool,
        /// Also check the algebraic formulas against this index.
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Latency and memory table over synthetic corpora.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "250000,500000,750000,1000000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        /// Thread count for the scoring path.
        #[arg(long)]
        threads: Option<usize>,
        /// Where the temporary benchmark databases go.
        #[arg(long, default_value = ".")]
        workdir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Index { jsonl, db, dim, seed } => cmd_index(&jsonl, &db, dim, seed, cli.json),
        Command::Query { sql, db, now } => cmd_query(&sql, &db, now.as_deref(), cli.json),
        Command::Orient { db } => cmd_query("@orient", &db, None, cli.json),
        Command::Validate {
            algebraic,
            behavioral,
            db,
        } => {
            let both = !algebraic && !behavioral;
            cmd_validate(algebraic || both, behavioral || both, db.as_deref(), cli.json)
        }
        Command::Bench {
            sizes,
            reps,
            dim,
            threads,
            workdir,
        } => {
            let config = BenchConfig {
                sizes,
                reps,
                dim,
                threads,
                ..Default::default()
            };
            cmd_bench(&config, &workdir, cli.json)
        }
    }
}

fn cmd_index(jsonl: &Path, db: &Path, dim: usize, seed: u64, as_json: bool) -> Result<bool> {
    let (records, mut rejected) = index::read_jsonl(jsonl).with_context(|| format!("reading {}", jsonl.display()))?;
    let mut report = index::index_records(&records, db, dim, seed)?;
    rejected.append(&mut report.rejected);
    rejected.sort_by_key(|r| r.line);
    let counts = index::IngestCounts {
        rejected: rejected.len(),
        ..report.counts
    };
    if as_json {
        let rejected: Vec<_> = rejected.iter().map(|r| json!({"line": r.line, "reason": r.reason})).collect();
        println!("{}", json!({"counts": counts, "rejected": rejected}));
    } else {
        println!(
            "inserted {}  skipped_duplicate {}  rejected {}",
            counts.inserted, counts.skipped_duplicate, counts.rejected
        );
        for r in &rejected {
            println!("  line {}: {}", r.line, r.reason);
        }
    }
    Ok(true)
}

fn resolve_now(now: Option<&str>) -> Result<f64> {
    match now {
        Some(s) => match parse_timestamp(s) {
            Some(dt) => Ok(epoch_seconds(&dt)),
            None => bail!("--now: cannot parse {s:?} as ISO-8601"),
        },
        None => Ok(epoch_seconds(&Utc::now())),
    }
}

fn cmd_query(input: &str, db: &Path, now: Option<&str>, as_json: bool) -> Result<bool> {
    if !db.exists() {
        bail!("database {} does not exist; run `pem index` first", db.display());
    }
    let loaded = LoadedIndex::open(db)?;
    let conn = loaded.connect()?;
    let ctx = QueryContext {
        store: &loaded.store,
        embedder: &loaded.embedder,
        now: resolve_now(now)?,
    };
    let output = sql::execute(&conn, &ctx, input)?;
    if as_json {
        println!("{}", serde_json::to_string(&output)?);
        return Ok(true);
    }
    match output {
        Output::Rows(out) => {
            if !out.materialized.temp_tables.is_empty() {
                for line in out.materialized.plan_note.lines() {
                    println!("# {line}");
                }
            }
            print_table(&out.result);
        }
        Output::Preset { sections, .. } => {
            for (i, (name, rs)) in sections.iter().enumerate() {
                if i > 0 {
                    println!();
                }
                println!("== {name}");
                print_table(rs);
            }
        }
    }
    Ok(true)
}

fn print_table(rs: &ResultSet) {
    println!("{}", rs.columns.join("\t"));
    for row in &rs.rows {
        let cells: Vec<String> = row.iter().map(|c| c.to_string().replace(['\n', '\t'], " ")).collect();
        println!("{}", cells.join("\t"));
    }
}

fn cmd_validate(algebraic: bool, behavioral: bool, db: Option<&Path>, as_json: bool) -> Result<bool> {
    let mut ok = true;
    let mut out = serde_json::Map::new();
    if algebraic {
        let mut fixtures = validate::algebraic_fixtures(1000, 128);
        if let Some(db) = db {
            fixtures.push(Fixture::open_index(db, epoch_seconds(&Utc::now()))?);
        }
        let report = validate::algebraic_suite(&fixtures, &AlgebraicConfig::default());
        ok &= report.passed;
        if as_json {
            out.insert("algebraic".into(), serde_json::to_value(&report)?);
        } else {
            println!("algebraic: {} corpora, {} comparisons, {} mismatches at {:e} -> {}",
                report.corpora, report.comparisons, report.mismatches, validate::ALGEBRAIC_TOLERANCE,
                if report.passed { "PASS" } else { "FAIL" });
            println!("operation\tcomparisons\tmismatches\tmax_abs_error");
            for op in &report.operations {
                println!("{}\t{}\t{}\t{:.3e}", op.operation, op.comparisons, op.mismatches, op.max_abs_error);
            }
        }
    }
    if behavioral {
        let fixture = Fixture::clustered(3000, &ClusterSpec::default(), 128, 11, 1.8e9);
        let report = validate::behavioral_suite(&fixture, &BehavioralConfig::default());
        let directions = report.directions_hold();
        ok &= directions.iter().all(|(_, d)| *d);
        if as_json {
            let dirs: serde_json::Map<_, _> = directions.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
            out.insert("behavioral".into(), json!({"reports": report.reports, "directions": dirs}));
        } else {
            if algebraic {
                println!();
            }
            println!("behavioral: {} queries per modulation", BehavioralConfig::default().queries);
            println!("modulation\trbo\tils\tbaseline_ils\tcentroid_sim_delta\tndcg@10\tbaseline_ndcg@10\tage_shift_days");
            let opt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.3}"));
            for r in &report.reports {
                println!(
                    "{}\t{:.3}\t{:.3}\t{:.3}\t{:+.3}\t{}\t{}\t{:+.1}",
                    r.modulation, r.rbo, r.ils, r.baseline_ils, r.centroid_sim_delta(),
                    opt(r.ndcg_at_10), opt(r.baseline_ndcg_at_10), r.mean_age_shift_days
                );
            }
            for (what, held) in &directions {
                println!("{}: {what}", if *held { "PASS" } else { "FAIL" });
            }
        }
    }
    if as_json {
        out.insert("passed".into(), json!(ok));
        println!("{}", serde_json::Value::Object(out));
    }
    Ok(ok)
}

fn cmd_bench(config: &BenchConfig, workdir: &Path, as_json: bool) -> Result<bool> {
    std::fs::create_dir_all(workdir)?;
    if !as_json {
        println!("chunks\tbase_matmul_ms\tmods_mmr_ms\tfull_pipeline_ms\tkeyword_ms\thybrid_ms\tprefilter_n\tprefiltered_phase2_ms\tmatrix_bytes");
    }
    let print_row = |r: &BenchRow| {
        if as_json {
            println!("{}", serde_json::to_string(r).expect("row serializes"));
        } else {
            println!(
                "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}\t{:.2}\t{}",
                r.chunks, r.base_matmul_ms, r.modulated_mmr_ms, r.full_pipeline_ms, r.keyword_ms,
                r.hybrid_ms, r.prefilter_candidates, r.prefiltered_phase2_ms, r.matrix_bytes
            );
        }
    };
    let rows = bench::run(config, workdir, print_row)?;
    if rows.len() >= 2 && !as_json {
        let x: Vec<f64> = rows.iter().map(|r| r.chunks as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.matrix_bytes as f64).collect();
        println!("memory R^2 vs chunks: {:.6}", bench::r_squared(&x, &y));
    }
    Ok(true)
}
