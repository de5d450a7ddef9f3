use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing_subscriber::EnvFilter;

use cdrtool_core::analytics::{self, activity_series, correlation_report, write_aggregates, write_series, Weighting};
use cdrtool_core::event::EventConfig;
use cdrtool_core::geo::BoundingBox;
use cdrtool_core::ingest::{parse_timestamp, IngestOptions, UnknownDevices, Zone};
use cdrtool_core::pipeline::{self, exit_code};
use cdrtool_core::store::Store;
use cdrtool_core::synth::{self, ScenarioConfig};
use cdrtool_core::tac::YearMonth;
use cdrtool_core::viz::{self, Indicator};
use cdrtool_core::{par, Error, Result};

/// Call detail record to socioeconomic status pipeline.
#[derive(Parser)]
#[command(name = "cdrtool", version)]
struct Cli {
    /// Store file read (and for in-place stages, rewritten) by the command.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Emit logs as JSON lines on stderr.
    #[arg(long, global = true)]
    log_json: bool,
    /// Worker threads; 1 selects the sequential code path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the raw CSV exports into a new store.
    Ingest(IngestArgs),
    /// Merge co-located cells into base stations.
    MergeCells {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attach phone prices and ages from the TAC table.
    Fuse {
        #[arg(long)]
        tacdb: PathBuf,
        /// Reference month for handset ages, YYYY-MM.
        #[arg(long)]
        reference: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        max_malformed: f64,
    },
    /// Keep the event attendance records in a new store.
    FilterEvent {
        #[arg(long)]
        event: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-station SES means and demographics.
    Aggregate {
        #[arg(long)]
        out: PathBuf,
        /// One sample per device per station instead of one per record.
        #[arg(long)]
        per_device: bool,
    },
    /// Activity counts per station and pooled.
    Series {
        #[arg(long = "bin", default_value_t = 3600)]
        bin_s: i64,
        #[arg(long)]
        out: PathBuf,
        /// Local start of the covered range.
        #[arg(long, requires = "to")]
        from: Option<String>,
        /// Local end of the covered range (exclusive).
        #[arg(long, requires = "from")]
        to: Option<String>,
    },
    /// Price-age correlation over station means.
    Correlate {
        #[arg(long)]
        aggregates: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a figure.
    Render(RenderArgs),
    /// Generate a synthetic scenario.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run every stage from a run configuration.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    cdr: PathBuf,
    #[arg(long)]
    cells: PathBuf,
    #[arg(long)]
    devices: PathBuf,
    #[arg(long, default_value = "Europe/Budapest")]
    tz: String,
    #[arg(long)]
    out: PathBuf,
    /// Declared dataset start (local); earlier rows are counted as out of range.
    #[arg(long, requires = "date_to")]
    date_from: Option<String>,
    #[arg(long, requires = "date_from")]
    date_to: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    max_malformed: f64,
    /// Reject CDR rows whose device is missing from the device table.
    #[arg(long)]
    reject_unknown_devices: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    Choropleth,
    Scatter,
    Series,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(value_enum)]
    figure: Figure,
    /// aggregates.csv, report.json or series.csv, by figure.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    geojson: Option<PathBuf>,
    #[arg(long, default_value = "price")]
    indicator: String,
    /// min_lat,max_lat,min_lon,max_lon; padded around the sites if absent.
    #[arg(long)]
    bbox: Option<String>,
    /// Event configuration whose window is marked on the series plot.
    #[arg(long)]
    event: Option<PathBuf>,
    #[arg(long, default_value = "Europe/Budapest")]
    tz: String,
    /// Comma-separated series names to plot.
    #[arg(long, default_value = "all")]
    series: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    let logs = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr);
    if cli.log_json {
        logs.json().init();
    } else {
        logs.init();
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            tracing::error!(error = %e, "failed");
            ExitCode::from(exit_code(e.class()) as u8)
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    match threads {
        Some(0) => Err(Error::Argument("--threads must be at least 1".into())),
        Some(1) => {
            par::set_mode(par::Mode::Sequential);
            Ok(())
        }
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Argument(format!("thread pool: {e}"))),
        #[cfg(not(feature = "parallel"))]
        Some(_) => {
            tracing::warn!("built without parallel support; running sequentially");
            Ok(())
        }
        None => Ok(()),
    }
}

fn need_store(store: &Option<PathBuf>) -> Result<&Path> {
    store
        .as_deref()
        .ok_or_else(|| Error::Argument("this command needs --store <path>".into()))
}

fn open(path: &Path) -> Result<Store> {
    if !path.is_file() {
        return Err(Error::Config(format!("store {} does not exist", path.display())));
    }
    Store::open(path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

fn parse_bbox(text: &str) -> Result<BoundingBox> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Argument(format!("--bbox: {e}")))?;
    match v[..] {
        [a, b, c, d] => BoundingBox::new(a, b, c, d),
        _ => Err(Error::Argument("--bbox needs min_lat,max_lat,min_lon,max_lon".into())),
    }
}

fn run(cli: Cli) -> Result<u8> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Ingest(a) => {
            let zone: Zone = a.tz.parse()?;
            let date_range = match (&a.date_from, &a.date_to) {
                (Some(f), Some(t)) => Some((parse_timestamp(f, zone)?, parse_timestamp(t, zone)?)),
                _ => None,
            };
            let opts = IngestOptions {
                zone,
                date_range,
                max_malformed_fraction: a.max_malformed,
                unknown_devices: if a.reject_unknown_devices {
                    UnknownDevices::Reject
                } else {
                    UnknownDevices::Intern
                },
            };
            let store = pipeline::ingest(&a.cdr, &a.cells, &a.devices, &opts)?;
            store.persist(&a.out)?;
            print(json!({ "store": a.out, "reports": store.meta.ingest }));
        }
        Command::MergeCells { out } => {
            let path = need_store(&cli.store)?;
            let mut store = open(path)?;
            store.merge_cells()?;
            store.persist(out.as_deref().unwrap_or(path))?;
            print(json!({ "cells": store.cells.rows.len(), "stations": store.stations.len() }));
        }
        Command::Fuse {
            tacdb,
            reference,
            out,
            max_malformed,
        } => {
            let path = need_store(&cli.store)?;
            let reference: YearMonth = reference.parse()?;
            let mut store = open(path)?;
            let coverage = pipeline::fuse(&mut store, &tacdb, reference, max_malformed)?;
            store.persist(out.as_deref().unwrap_or(path))?;
            print(json!({
                "total": coverage.total,
                "matched": coverage.matched,
                "unmatched": coverage.unmatched,
                "unmatched_tacs": coverage.unmatched_tacs.len(),
            }));
        }
        Command::FilterEvent { event, seeds, out } => {
            let store = open(need_store(&cli.store)?)?;
            if !event.is_file() {
                return Err(Error::Config(format!(
                    "event config {} does not exist",
                    event.display()
                )));
            }
            let subset = pipeline::filter_event(&store, &EventConfig::load(&event)?, &pipeline::load_seeds(&seeds)?)?;
            subset.persist(&out)?;
            print(serde_json::to_value(&subset.meta.event).expect("event metadata serializes"));
        }
        Command::Aggregate { out, per_device } => {
            let store = open(need_store(&cli.store)?)?;
            let weighting = if per_device {
                Weighting::PerDevice
            } else {
                Weighting::PerSample
            };
            let rows = pipeline::aggregate(&store, weighting)?;
            let mut buf = Vec::new();
            write_aggregates(&mut buf, &rows)?;
            write_file(&out, &buf)?;
            print(json!({ "stations": rows.len(), "records": rows.iter().map(|a| a.n_total).sum::<u64>() }));
        }
        Command::Series { bin_s, out, from, to } => {
            let store = open(need_store(&cli.store)?)?;
            let zone = store.zone()?;
            let range = match (from, to) {
                (Some(f), Some(t)) => Some((parse_timestamp(&f, zone)?, parse_timestamp(&t, zone)?)),
                _ => None,
            };
            let series = activity_series(store.cdrs().records(), bin_s, range)?;
            let mut buf = Vec::new();
            write_series(&mut buf, &series)?;
            write_file(&out, &buf)?;
            print(json!({ "bins": series.pooled.counts.len(), "stations": series.stations.len() }));
        }
        Command::Correlate {
            aggregates,
            labels,
            out,
        } => {
            let rows = analytics::load_aggregates(&aggregates)?;
            let labels = match labels {
                Some(p) => analytics::load_labels(&p)?,
                None => Default::default(),
            };
            let report = correlation_report(&rows, &labels)?;
            write_file(&out, pipeline::report_json(&report).as_bytes())?;
            print(json!({ "r": report.r, "n": report.n, "n_excluded": report.n_excluded }));
        }
        Command::Render(a) => render(a)?,
        Command::Synth { config, out_dir } => {
            let cfg = match config {
                Some(p) => ScenarioConfig::load(&p)?,
                None => ScenarioConfig::default(),
            };
            let scenario = synth::generate(&cfg)?;
            scenario.write(&out_dir)?;
            let gt = &scenario.ground_truth;
            print(json!({
                "out_dir": out_dir,
                "cdr_rows": gt.n_cdr_rows,
                "planted_mean_correlation": gt.planted_mean_correlation,
            }));
        }
        Command::RunAll { config, out_dir } => {
            let outcome = pipeline::run_all(&config, &out_dir);
            print(json!({
                "status": outcome.manifest.status,
                "exit_code": outcome.manifest.exit_code,
                "failed_stage": outcome.manifest.failed_stage,
                "manifest": out_dir.join("manifest.json"),
            }));
            return Ok(outcome.manifest.exit_code as u8);
        }
    }
    Ok(0)
}

fn render(a: RenderArgs) -> Result<()> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    match a.figure {
        Figure::Choropleth => {
            let rows = analytics::load_aggregates(&a.input)?;
            let bbox = a.bbox.as_deref().map(parse_bbox).transpose()?;
            let c = pipeline::render_choropleth(&rows, bbox, a.indicator.parse::<Indicator>()?)?;
            write_file(&a.out, c.svg.as_bytes())?;
            if let Some(g) = &a.geojson {
                write_file(g, (c.geojson.to_string() + "\n").as_bytes())?;
            }
        }
        Figure::Scatter => {
            let report = serde_json::from_str(&read(&a.input)?)
                .map_err(|e| Error::Config(format!("{}: {e}", a.input.display())))?;
            write_file(&a.out, viz::render_scatter(&report).as_bytes())?;
        }
        Figure::Series => {
            let f = fs::File::open(&a.input).map_err(|e| Error::io(&a.input, e))?;
            let all = analytics::read_series(f)?;
            let series = a
                .series
                .split(',')
                .map(|name| {
                    all.get(name)
                        .map(|s| (name.to_string(), s.clone()))
                        .ok_or_else(|| Error::Argument(format!("no series named {name:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let rules = match &a.event {
                Some(p) => {
                    let cfg = EventConfig::load(p)?;
                    let (s, e) = cfg.show(a.tz.parse()?)?;
                    let m = cfg.margin_min * 60;
                    Some((s - m, e + m))
                }
                None => None,
            };
            write_file(&a.out, viz::render_series(&series, rules)?.as_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn bbox_argument() {
        let b = parse_bbox("47.4, 47.6,19.0,19.2").unwrap();
        assert_eq!((b.min_lat, b.max_lon), (47.4, 19.2));
        assert!(parse_bbox("47.4,47.6,19.0").is_err());
        assert!(parse_bbox("47.6,47.4,19.0,19.2").is_err());
        assert!(parse_bbox("a,b,c,d").is_err());
    }

    #[test]
    fn zero_threads_is_an_argument_error() {
        let e = configure_threads(Some(0)).unwrap_err();
        assert_eq!(exit_code(e.class()), 2);
    }
}
