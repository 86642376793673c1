//! Subprocess helpers shared by detection, installation and pipelines.

use std::io::{self, Read};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

#[derive(Debug, Clone)]
pub struct Captured {
    /// `None` when the process was killed on timeout.
    pub status: Option<ExitStatus>,
    pub stdout: String,
    pub stderr: String,
    /// Spawn to exit, monotonic clock.
    pub elapsed: Duration,
}

impl Captured {
    pub fn success(&self) -> bool {
        self.status.is_some_and(|s| s.success())
    }

    pub fn timed_out(&self) -> bool {
        self.status.is_none()
    }

    /// Exit description for error messages.
    pub fn describe_exit(&self) -> String {
        match self.status {
            None => "timed out".into(),
            Some(s) => match s.code() {
                Some(c) => format!("exit code {c}"),
                None => "killed by signal".into(),
            },
        }
    }

    pub fn combined_output(&self) -> String {
        let mut s = self.stdout.clone();
        if !self.stderr.is_empty() {
            if !s.is_empty() && !s.ends_with('\n') {
                s.push('\n');
            }
            s.push_str(&self.stderr);
        }
        s
    }
}

/// `/bin/sh -c <script>`.
pub fn shell(script: &str) -> Command {
    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c").arg(script);
    cmd
}

/// Spawns, retrying briefly on ETXTBSY, which Linux reports when a freshly
/// written executable is still open for writing in a forked sibling.
fn spawn(cmd: &mut Command) -> io::Result<Child> {
    let mut attempts = 0;
    loop {
        match cmd.spawn() {
            Err(e) if e.raw_os_error() == Some(26) && attempts < 50 => {
                attempts += 1;
                thread::sleep(Duration::from_millis(10));
            }
            other => return other,
        }
    }
}

/// Runs `cmd` with captured output, killing it after `timeout` if given.
pub fn run_captured(cmd: &mut Command, timeout: Option<Duration>) -> io::Result<Captured> {
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let start = Instant::now();
    let mut child = spawn(cmd)?;
    let mut out = child.stdout.take().expect("piped stdout");
    let mut err = child.stderr.take().expect("piped stderr");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err.read_to_end(&mut buf);
        buf
    });
    let status = match timeout {
        Some(t) => match child.wait_timeout(t)? {
            Some(s) => Some(s),
            None => {
                // the whole group, so grandchildren release the pipes
                unsafe {
                    libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
                }
                let _ = child.kill();
                let _ = child.wait();
                None
            }
        },
        None => Some(child.wait()?),
    };
    let elapsed = start.elapsed();
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    Ok(Captured {
        status,
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
        elapsed,
    })
}

/// Runs a shell script in `cwd`, after sourcing `env_script` when given.
pub fn run_shell_in(
    script: &str,
    cwd: &Path,
    env_script: Option<&Path>,
    timeout: Option<Duration>,
) -> io::Result<Captured> {
    let full = match env_script {
        Some(p) => format!(". '{}'\n{}", p.display().to_string().replace('\'', r"'\''"), script),
        None => script.to_owned(),
    };
    let mut cmd = shell(&full);
    cmd.current_dir(cwd);
    run_captured(&mut cmd, timeout)
}
