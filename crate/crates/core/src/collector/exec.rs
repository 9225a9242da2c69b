//! The generic `exec` module: runs an external command whose stdout lines
//! are `<farm>/<cluster>/<node>/<param> <value> [<epoch_ms>]`.

use std::io::Read;
use std::process::{Command, Stdio};
use std::time::Duration;

use super::{CollectorModule, RunContext};
use crate::metric::MetricValue;

#[derive(Debug, Default, Clone)]
pub struct ExecModule;

impl ExecModule {
    pub const NAME: &'static str = "exec";

    /// Parses collector output. Malformed lines fail the whole run.
    pub fn parse_output(stdout: &str) -> Result<Vec<MetricValue>, String> {
        stdout
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| MetricValue::parse_exec_line(l).map_err(|e| e.to_string()))
            .collect()
    }
}

impl CollectorModule for ExecModule {
    fn name(&self) -> &str {
        Self::NAME
    }

    /// `target` is a shell command line.
    fn collect(&self, target: &str, ctx: &RunContext) -> Result<Vec<MetricValue>, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(target)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("spawn `{target}`: {e}"))?;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut out = String::new();
            stdout.read_to_string(&mut out).map(|_| out)
        });
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    let out = reader
                        .join()
                        .map_err(|_| "reader panicked".to_string())?
                        .map_err(|e| e.to_string())?;
                    if !status.success() {
                        return Err(format!("`{target}` exited with {status}"));
                    }
                    return Self::parse_output(&out);
                }
                Ok(None) => {
                    if !ctx.cancel.wait(Duration::from_millis(5)) {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err("cancelled at deadline".into());
                    }
                }
                Err(e) => return Err(e.to_string()),
            }
        }
    }
}
