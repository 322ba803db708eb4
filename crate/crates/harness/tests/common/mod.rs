#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mil_harness::config::RunConfig;

pub const SMOKE: &str = include_str!("../../../../configs/smoke.toml");
pub const ACCEPTANCE: &str = include_str!("../../../../configs/acceptance.toml");

pub fn smoke() -> RunConfig {
    RunConfig::from_toml_str(SMOKE).unwrap()
}

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn mil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mil")).args(args).output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}
