//! Application catalogue. Backend programs are in-process plugins keyed by
//! entrypoint; the repository hands out descriptors plus a synthetic package
//! whose bytes stand in for the installable binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analytic::{self, AnalyticConfig};

pub const APNEA_APP: &str = "apnea";
pub const APNEA_ENTRYPOINT: &str = "builtin:apnea-analytic";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoContract {
    pub input_file: String,
    pub output_file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppDescriptor {
    pub app_id: String,
    pub entrypoint: String,
    pub resource_requirements: u32,
    pub io_contract: IoContract,
    /// Simulated start-up cost paid each time the program is launched.
    #[serde(default)]
    pub launch_ms: u64,
    /// Size of the installable package shipped to executors.
    #[serde(default)]
    pub package_bytes: usize,
}

impl AppDescriptor {
    pub fn apnea() -> Self {
        Self {
            app_id: APNEA_APP.into(),
            entrypoint: APNEA_ENTRYPOINT.into(),
            resource_requirements: 1,
            io_contract: IoContract {
                input_file: "input.txt".into(),
                output_file: "output.json".into(),
            },
            launch_ms: 0,
            package_bytes: 64 * 1024,
        }
    }

    /// Deterministic stand-in for the program binary.
    pub fn package(&self) -> Vec<u8> {
        let seed = self.app_id.bytes().fold(0u8, |a, b| a.wrapping_mul(31).wrapping_add(b));
        (0..self.package_bytes).map(|i| seed.wrapping_add(i as u8)).collect()
    }
}

pub type Program = Arc<dyn Fn(&[u8]) -> Result<Vec<u8>, String> + Send + Sync>;

/// Entry points known to this process.
#[derive(Clone)]
pub struct ProgramRegistry {
    programs: BTreeMap<String, Program>,
}

impl Default for ProgramRegistry {
    fn default() -> Self {
        let mut r = Self {
            programs: BTreeMap::new(),
        };
        let config = AnalyticConfig::default();
        r.register(
            APNEA_ENTRYPOINT,
            Arc::new(move |input: &[u8]| analytic::analyze(input, &config).map_err(|e| e.to_string())),
        );
        r
    }
}

impl ProgramRegistry {
    pub fn register(&mut self, entrypoint: &str, program: Program) {
        self.programs.insert(entrypoint.into(), program);
    }

    pub fn get(&self, entrypoint: &str) -> Option<Program> {
        self.programs.get(entrypoint).cloned()
    }
}

/// Runs `program` through its file contract inside `dir`: the input is
/// written as the input file and the output file is read back.
pub fn run_with_files(program: &Program, app: &AppDescriptor, dir: &Path, input: &[u8]) -> Result<Vec<u8>, String> {
    let in_path = dir.join(&app.io_contract.input_file);
    let out_path = dir.join(&app.io_contract.output_file);
    std::fs::write(&in_path, input).map_err(|e| format!("write input: {e}"))?;
    let data = std::fs::read(&in_path).map_err(|e| format!("read input: {e}"))?;
    let out = program(&data)?;
    std::fs::write(&out_path, &out).map_err(|e| format!("write output: {e}"))?;
    std::fs::read(&out_path).map_err(|e| format!("read output: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_registry_runs_apnea() {
        let reg = ProgramRegistry::default();
        let app = AppDescriptor::apnea();
        let p = reg.get(&app.entrypoint).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run_with_files(&p, &app, dir.path(), b"0 70 95\n500 70 95\n").unwrap();
        let r: crate::model::AnalysisResult = serde_json::from_slice(&out).unwrap();
        assert_eq!(r.dip_count_raw, 0);
        assert!(reg.get("builtin:none").is_none());
        assert_eq!(app.package().len(), 64 * 1024);
    }
}
