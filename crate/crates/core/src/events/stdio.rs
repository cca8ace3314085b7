use std::io::{Read, Write};
use std::process::{ChildStderr, ChildStdin, ChildStdout};
use std::sync::{Arc, Mutex};

use crate::backend::StdioPipes;
use crate::error::{Error, Result};

/// Tracee standard streams. Cheap to clone and usable from any thread, so a
/// helper thread can talk to the tracee while the engine loop runs.
#[derive(Debug, Clone)]
pub struct StdioChannels {
    stdin: Arc<Mutex<Option<ChildStdin>>>,
    stdout: Arc<Mutex<ChildStdout>>,
    stderr: Arc<Mutex<ChildStderr>>,
}

impl StdioChannels {
    pub(crate) fn new(pipes: StdioPipes) -> Self {
        StdioChannels {
            stdin: Arc::new(Mutex::new(Some(pipes.stdin))),
            stdout: Arc::new(Mutex::new(pipes.stdout)),
            stderr: Arc::new(Mutex::new(pipes.stderr)),
        }
    }

    /// Writes all of `data`; returns its length.
    pub fn write_stdin(&self, data: &[u8]) -> Result<usize> {
        let mut guard = self.stdin.lock().unwrap();
        let stdin = guard.as_mut().ok_or(Error::EndOfStream)?;
        match stdin.write_all(data).and_then(|_| stdin.flush()) {
            Ok(()) => Ok(data.len()),
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Err(Error::EndOfStream),
            Err(e) => Err(e.into()),
        }
    }

    /// Closes the tracee's stdin so it observes end of file.
    pub fn close_stdin(&self) {
        self.stdin.lock().unwrap().take();
    }

    /// Blocks until some output is available and returns at most `max` bytes.
    pub fn read_stdout(&self, max: usize) -> Result<Vec<u8>> {
        read_some(&mut *self.stdout.lock().unwrap(), max)
    }

    pub fn read_stderr(&self, max: usize) -> Result<Vec<u8>> {
        read_some(&mut *self.stderr.lock().unwrap(), max)
    }

    /// Reads stdout until `needle` has been seen, returning everything read.
    pub fn read_stdout_until(&self, needle: &[u8]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        while !out.windows(needle.len().max(1)).any(|w| w == needle) {
            out.extend(self.read_stdout(4096)?);
        }
        Ok(out)
    }

    /// Drains stdout to end of file.
    pub fn read_stdout_to_end(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.stdout.lock().unwrap().read_to_end(&mut out)?;
        Ok(out)
    }

    pub fn read_stderr_to_end(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.stderr.lock().unwrap().read_to_end(&mut out)?;
        Ok(out)
    }
}

fn read_some(r: &mut impl Read, max: usize) -> Result<Vec<u8>> {
    if max == 0 {
        return Ok(Vec::new());
    }
    let mut buf = vec![0; max];
    let n = loop {
        match r.read(&mut buf) {
            Ok(n) => break n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    };
    if n == 0 {
        return Err(Error::EndOfStream);
    }
    buf.truncate(n);
    Ok(buf)
}
