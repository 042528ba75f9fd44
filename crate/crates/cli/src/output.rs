use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Collects the files written by one run so the manifest can list them.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let mut f = fs::File::create(self.path(name))?;
        f.write_all(bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[String]) -> std::io::Result<()> {
        let mut text = String::with_capacity(64 * (rows.len() + 1));
        text.push_str(header);
        text.push('\n');
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes `manifest.json` last; it records every earlier output.
    pub fn finish<T: Serialize>(
        mut self,
        command: &str,
        argv: Vec<String>,
        config: &T,
    ) -> std::io::Result<Vec<String>> {
        #[derive(Serialize)]
        struct Manifest<'a, T> {
            tool: &'static str,
            version: &'static str,
            command: &'a str,
            argv: Vec<String>,
            config: &'a T,
            outputs: &'a [String],
        }
        let outputs = self.written.clone();
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv,
            config,
            outputs: &outputs,
        };
        self.write_json("manifest.json", &manifest)?;
        Ok(self.written)
    }
}

/// Command-line arguments with the output-directory option removed, so a
/// manifest can be replayed into any directory.
pub fn replay_argv(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip_next = false;
    for a in args {
        if skip_next {
            skip_next = false;
            continue;
        }
        if a == "--out" || a == "-o" {
            skip_next = true;
        } else if !(a.starts_with("--out=") || (a.starts_with("-o") && a.len() > 2)) {
            out.push(a);
        }
    }
    out
}
