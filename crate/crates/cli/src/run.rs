use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use log::info;
use serde::{Deserialize, Serialize};
use vfedmh::baselines::{run_aggvfl, run_aggvfl_active, run_aggvfl_passive, run_local, Method};
use vfedmh::data::{vertical_split, Dataset};
use vfedmh::metrics::{write_records_csv, PartyTraffic, RoundLedger};
use vfedmh::nn::NetworkState;
use vfedmh::protocol::{
    assemble, run_active, run_passive, run_session, Labels, PartyData, PassiveOutcome, SessionConfig,
    SessionOutcome,
};
use vfedmh::transport::{PartyId, TcpHub, TcpLink};

use crate::config::{Loaded, TransportMode};
use crate::CliError;

pub const OUTPUT_ENV: &str = "VFEDMH_OUTPUT_DIR";

pub fn output_dir(loaded: &Loaded) -> PathBuf {
    if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(dir);
    }
    match &loaded.config.output_dir {
        Some(d) if d.is_absolute() => d.clone(),
        Some(d) => loaded.base.join(d),
        None => PathBuf::from("vfedmh-out"),
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn cmd_run(config: &Path) -> Result<SessionOutcome, CliError> {
    let loaded = crate::config::load(config)?;
    let (train, test) = loaded.datasets()?;
    let session = loaded.session(&train)?;
    let out_dir = output_dir(&loaded);
    fs::create_dir_all(&out_dir).map_err(|e| runtime(format!("{}: {e}", out_dir.display())))?;
    let method = loaded.config.method;
    info!("{method}: {} parties, {} train rows", session.parties.len(), train.len());
    let outcome = match (method, loaded.config.transport.mode) {
        (Method::Local, _) => local_all(&session, &train, test.as_ref())?,
        (Method::Vfedmh, TransportMode::Inmem) => {
            run_session(&session, &train, test.as_ref(), session.initial_states()).map_err(runtime)?
        }
        (Method::Aggvfl, TransportMode::Inmem) => {
            run_aggvfl(&session, &train, test.as_ref(), session.initial_states()).map_err(runtime)?
        }
        (_, TransportMode::Tcp) => tcp_hub(config, &loaded, &session, &train, test.as_ref(), &out_dir)?,
    };
    write_outputs(&outcome, &out_dir)?;
    Ok(outcome)
}

fn write_outputs(outcome: &SessionOutcome, dir: &Path) -> Result<(), CliError> {
    let csv = dir.join("metrics.csv");
    let file = fs::File::create(&csv).map_err(|e| runtime(format!("{}: {e}", csv.display())))?;
    write_records_csv(&outcome.records(), file).map_err(runtime)?;
    let json = serde_json::to_string_pretty(&outcome.summary()).map_err(runtime)?;
    let path = dir.join("summary.json");
    fs::write(&path, json + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Every party trains its own full network on its own columns.
fn local_all(session: &SessionConfig, train: &Dataset, test: Option<&Dataset>) -> Result<SessionOutcome, CliError> {
    let parties = session.parties.len();
    let slices = |d: &Dataset| -> Result<Vec<Dataset>, CliError> {
        vertical_split(d, parties)
            .map_err(runtime)?
            .into_iter()
            .map(|s| Dataset::new(s.features, d.labels.clone(), d.classes, s.row_width).map_err(runtime))
            .collect()
    };
    let train_k = slices(train)?;
    let test_k = test.map(slices).transpose()?;
    let mut states = Vec::new();
    let mut loss = vec![vec![0.0; parties]; session.epochs];
    let mut acc = vec![vec![f64::NAN; parties]; session.epochs];
    for (k, state) in session.initial_states().into_iter().enumerate() {
        let solo = SessionConfig {
            parties: vec![session.parties[k].clone()],
            ..session.clone()
        };
        let out = run_local(&solo, &train_k[k], test_k.as_ref().map(|t| &t[k]), state).map_err(runtime)?;
        for e in 0..session.epochs {
            loss[e][k] = out.train_loss[e];
            acc[e][k] = out.test_acc[e];
        }
        states.push(out.state);
    }
    Ok(SessionOutcome {
        method: "local".into(),
        states,
        train_loss: loss,
        test_acc: acc,
        ledger: RoundLedger {
            method: "local".into(),
            messages_per_batch: 0,
            batches_per_epoch: vfedmh::data::batches_per_epoch(train.len(), session.batch_size) as u64,
            epochs: session.epochs as u64,
            passive: (1..parties).map(|k| PartyTraffic::new(k as u16, session.epochs)).collect(),
        },
        history: vec![Vec::new(); parties],
        shared_secrets: vec![0; parties],
    })
}

/// What a passive party process hands back to the active one.
#[derive(Serialize, Deserialize)]
struct PartyReport {
    id: u16,
    state: NetworkState,
    traffic: PartyTraffic,
    train_loss: Vec<f64>,
    shared_secrets: usize,
}

fn report_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("party-{k}.json"))
}

/// Active party in tcp mode: listens, starts one process per passive party,
/// runs the hub and merges the passive reports.
fn tcp_hub(
    config: &Path,
    loaded: &Loaded,
    session: &SessionConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    out_dir: &Path,
) -> Result<SessionOutcome, CliError> {
    let listener = TcpListener::bind(&loaded.config.transport.address)
        .map_err(|e| runtime(format!("bind {}: {e}", loaded.config.transport.address)))?;
    let addr = listener.local_addr().map_err(runtime)?;
    let exe = std::env::current_exe().map_err(runtime)?;
    let mut children: Vec<(usize, Child)> = Vec::new();
    for k in 1..session.parties.len() {
        let child = Command::new(&exe)
            .arg("party")
            .arg("-c")
            .arg(config)
            .args(["--id", &k.to_string(), "--connect", &addr.to_string()])
            .arg("--report")
            .arg(report_path(out_dir, k))
            .spawn()
            .map_err(|e| runtime(format!("spawn party {k}: {e}")))?;
        children.push((k, child));
    }
    let shards = split_pair(train, test, session.parties.len())?;
    let active = (|| {
        let mut hub = TcpHub::accept(&listener, session.passive(), session.timeout).map_err(runtime)?;
        let data = PartyData {
            train: &shards.0[0],
            test: shards.1.as_ref().map(|t| &t[0]),
        };
        let labels = Labels {
            train: &train.labels,
            test: test.map(|t| t.labels.as_slice()),
        };
        match loaded.config.method {
            Method::Aggvfl => run_aggvfl_active(session, session.initial_states().remove(0), data, labels, &mut hub),
            _ => run_active(session, session.initial_states().remove(0), data, labels, &mut hub),
        }
        .map_err(runtime)
    })();
    let mut failed = Vec::new();
    for (k, mut child) in children {
        if active.is_err() {
            let _ = child.kill();
        }
        match child.wait() {
            Ok(s) if s.success() => {}
            Ok(s) => failed.push(format!("party {k} exited with {s}")),
            Err(e) => failed.push(format!("party {k}: {e}")),
        }
    }
    let active = active?;
    if !failed.is_empty() {
        return Err(CliError::Runtime(failed.join("; ")));
    }
    let mut passive = Vec::new();
    for k in 1..session.parties.len() {
        let path = report_path(out_dir, k);
        let text = fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let r: PartyReport = serde_json::from_str(&text).map_err(runtime)?;
        let _ = fs::remove_file(&path);
        passive.push(PassiveOutcome {
            id: PartyId(r.id),
            state: r.state,
            traffic: r.traffic,
            train_loss: r.train_loss,
            shared_secrets: r.shared_secrets,
            history: Vec::new(),
        });
    }
    let (name, per_batch) = match loaded.config.method {
        Method::Aggvfl => ("aggvfl", 2),
        _ => ("vfedmh", 4),
    };
    Ok(assemble(name, per_batch, session, train.len(), active, passive))
}

type Split = (Vec<vfedmh::nn::Tensor>, Option<Vec<vfedmh::nn::Tensor>>);

fn split_pair(train: &Dataset, test: Option<&Dataset>, parties: usize) -> Result<Split, CliError> {
    let cols = |d: &Dataset| -> Result<Vec<_>, CliError> {
        Ok(vertical_split(d, parties).map_err(runtime)?.into_iter().map(|s| s.features).collect())
    };
    Ok((cols(train)?, test.map(cols).transpose()?))
}

/// One passive party over TCP.
pub fn cmd_party(config: &Path, id: u16, connect: Option<&str>, report: Option<&Path>) -> Result<(), CliError> {
    let loaded = crate::config::load(config)?;
    let (train, test) = loaded.datasets()?;
    let session = loaded.session(&train)?;
    let k = id as usize;
    if k == 0 || k >= session.parties.len() {
        return Err(CliError::Config(format!("--id {id} is not a passive party (1..{})", session.passive())));
    }
    let addr = connect.unwrap_or(&loaded.config.transport.address);
    let shards = split_pair(&train, test.as_ref(), session.parties.len())?;
    let data = PartyData {
        train: &shards.0[k],
        test: shards.1.as_ref().map(|t| &t[k]),
    };
    let mut link = TcpLink::connect(addr, PartyId(id), session.timeout).map_err(runtime)?;
    let state = session.initial_states().swap_remove(k);
    let out = match loaded.config.method {
        Method::Aggvfl => run_aggvfl_passive(&session, PartyId(id), state, data, &mut link),
        Method::Vfedmh => run_passive(&session, PartyId(id), state, data, &mut link),
        Method::Local => return Err(CliError::Config("method `local` exchanges no messages".into())),
    }
    .map_err(runtime)?;
    info!("party {id} finished");
    if let Some(path) = report {
        let r = PartyReport {
            id,
            state: out.state,
            traffic: out.traffic,
            train_loss: out.train_loss,
            shared_secrets: out.shared_secrets,
        };
        fs::write(path, serde_json::to_string(&r).map_err(runtime)?)
            .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
