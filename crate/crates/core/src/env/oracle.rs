//! External loss oracle over a child process.
//!
//! Protocol (version 1): line-delimited JSON on the child's standard streams,
//! one request per line, one response per line, strictly alternating.
//!
//! Request:
//! `{"version":1,"layers":24,"r_max":8,"ranks":[...],"entropy_bits":7.1,"oov_rate":0.05,"token_count":256}`
//!
//! Response: `{"version":1,"loss":0.41}` or `{"version":1,"error":"..."}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::ranks::RankVector;
use super::surrogate::LossOracle;
use crate::corpus::ComplexityStats;
use crate::error::{Error, Result};

pub const ORACLE_PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub version: u32,
    pub layers: usize,
    pub r_max: u32,
    pub ranks: Vec<u32>,
    pub entropy_bits: f64,
    pub oov_rate: f64,
    pub token_count: u64,
}

impl OracleRequest {
    pub fn new(ranks: &RankVector, stats: &ComplexityStats) -> Self {
        Self {
            version: ORACLE_PROTOCOL_VERSION,
            layers: ranks.layers(),
            r_max: ranks.r_max(),
            ranks: ranks.as_slice().to_vec(),
            entropy_bits: stats.entropy_bits,
            oov_rate: stats.oov_rate,
            token_count: stats.token_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

pub struct SubprocessOracle {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    line: String,
}

impl SubprocessOracle {
    pub fn spawn(cmd: &OracleCommand) -> Result<Self> {
        let mut child = Command::new(&cmd.program)
            .args(&cmd.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Oracle(format!("failed to start `{}`: {e}", cmd.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
            line: String::new(),
        })
    }

    pub fn query(&mut self, request: &OracleRequest) -> Result<f64> {
        let mut payload = serde_json::to_string(request)?;
        payload.push('\n');
        self.stdin
            .write_all(payload.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Oracle(format!("write failed: {e}")))?;
        self.line.clear();
        let n = self
            .stdout
            .read_line(&mut self.line)
            .map_err(|e| Error::Oracle(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Oracle("oracle closed its output".into()));
        }
        let resp: OracleResponse = serde_json::from_str(self.line.trim())
            .map_err(|e| Error::Oracle(format!("malformed response `{}`: {e}", self.line.trim())))?;
        if resp.version != ORACLE_PROTOCOL_VERSION {
            return Err(Error::Oracle(format!("unsupported protocol version {}", resp.version)));
        }
        match (resp.loss, resp.error) {
            (_, Some(e)) => Err(Error::Oracle(e)),
            (Some(l), None) if l.is_finite() => Ok(l),
            (Some(l), None) => Err(Error::Oracle(format!("non-finite loss {l}"))),
            (None, None) => Err(Error::Oracle("response carries neither loss nor error".into())),
        }
    }
}

impl LossOracle for SubprocessOracle {
    fn loss(
        &mut self,
        ranks: &RankVector,
        stats: &ComplexityStats,
        _rng: &mut dyn RngCore,
    ) -> Result<f64> {
        self.query(&OracleRequest::new(ranks, stats))
    }
}

impl Drop for SubprocessOracle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Answers protocol requests read from `input` with `oracle` until end of
/// input, one response line per request line. A bad request gets an error
/// response and serving continues. Returns the number of requests handled.
pub fn serve<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    oracle: &mut dyn LossOracle,
    rng: &mut dyn RngCore,
) -> Result<u64> {
    let mut handled = 0;
    for line in input.lines() {
        let line = line.map_err(|e| Error::Oracle(format!("read failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let answer = answer(&line, oracle, rng);
        let resp = match answer {
            Ok(loss) => OracleResponse { version: ORACLE_PROTOCOL_VERSION, loss: Some(loss), error: None },
            Err(e) => OracleResponse { version: ORACLE_PROTOCOL_VERSION, loss: None, error: Some(e.to_string()) },
        };
        let mut payload = serde_json::to_string(&resp)?;
        payload.push('\n');
        output
            .write_all(payload.as_bytes())
            .and_then(|_| output.flush())
            .map_err(|e| Error::Oracle(format!("write failed: {e}")))?;
        handled += 1;
    }
    Ok(handled)
}

fn answer(line: &str, oracle: &mut dyn LossOracle, rng: &mut dyn RngCore) -> Result<f64> {
    let req: OracleRequest =
        serde_json::from_str(line).map_err(|e| Error::Oracle(format!("malformed request: {e}")))?;
    if req.version != ORACLE_PROTOCOL_VERSION {
        return Err(Error::Oracle(format!("unsupported protocol version {}", req.version)));
    }
    let ranks = RankVector::new(req.ranks, req.r_max, req.layers)?;
    let stats = ComplexityStats {
        entropy_bits: req.entropy_bits,
        oov_rate: req.oov_rate,
        token_count: req.token_count,
    };
    oracle.loss(&ranks, &stats, rng)
}
