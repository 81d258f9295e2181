use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Relative paths land under the output directory; absolute ones are kept.
pub fn resolve(out_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

pub fn create(out_dir: &Path, p: &Path) -> Result<BufWriter<File>> {
    let path = resolve(out_dir, p);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes `text` to the given file, or to stdout when there is none.
pub fn emit(out_dir: &Path, target: Option<&Path>, text: &str) -> Result<()> {
    match target {
        Some(p) => {
            let mut w = create(out_dir, p)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => {
            let mut so = io::stdout().lock();
            match so.write_all(text.as_bytes()).and_then(|_| so.flush()) {
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

pub fn open(p: &Path) -> Result<BufReader<File>> {
    let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Ok(BufReader::new(f))
}
