//! `cafc`: train, evaluate and deploy the split classifier.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 when a command fails.

mod commands;

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use cafc_core::harness::config::parse_k_list;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cafc", version, about = "Codebook-based feature compression for edge/cloud classification")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// key = value configuration file; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Checkpoint read and written by the training stages.
    #[arg(long, global = true, default_value = "cafc.ckpt")]
    pub checkpoint: PathBuf,
    /// Output file or directory; stdout when omitted where that makes sense.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fixed,
    Variable,
}

/// Comma-separated K values.
#[derive(Clone, Debug)]
pub struct KList(pub Vec<usize>);

fn k_list(v: &str) -> Result<KList, String> {
    parse_k_list(v).map(KList).map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render toy samples as PPM images plus labels.csv into --out.
    GenData {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Train the VQ tokenizer and start a new checkpoint.
    TrainTokenizer,
    /// Masked token pretraining of the token encoder.
    Pretrain,
    /// Train selector and task head on top of the pretrained encoder.
    Finetune {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Fixed K (implies --mode fixed unless given).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Linear-probe accuracy of the pretrained encoder's class token.
    LinearProbe,
    /// Rate/accuracy table (CSV) over the test split through the full split path.
    Sweep {
        #[arg(long, value_parser = k_list)]
        k_list: Option<KList>,
    },
    /// Finetune fixed-K and variable-K from the same pretrained checkpoint and
    /// compare them across the K list.
    Compare {
        #[arg(long, value_parser = k_list)]
        k_list: Option<KList>,
    },
    /// Serve classification requests from edge clients.
    ServeCloud {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: SocketAddr,
        /// Stop after this many connections.
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Tokenize test images, send packets to a cloud server and report accuracy.
    RunEdge {
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Also write each packet to this directory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Print the header, kept positions and indices of a packet file.
    InspectPacket { packet: PathBuf },
    /// Parameter counts per section and per deployment role.
    Params,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| writeln!(buf, "{}", rec.args()))
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
