use std::io::Write;
use std::process::{Command, Stdio};
use std::time::Instant;

use super::{Generator, GeneratorError, GeneratorReply, GeneratorRequest};

/// Adapter slot for a locally hosted fine-tuned model: runs a command with the
/// request JSON on stdin and reads the answer text from stdout.
#[derive(Debug, Clone)]
pub struct LocalCommandGenerator {
    program: String,
    args: Vec<String>,
    id: String,
}

impl LocalCommandGenerator {
    pub fn new(command: &[String]) -> Result<Self, GeneratorError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| GeneratorError::BackendUnavailable("empty local command".into()))?;
        Ok(Self {
            id: format!("local:{program}"),
            program: program.clone(),
            args: args.to_vec(),
        })
    }
}

impl Generator for LocalCommandGenerator {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorReply, GeneratorError> {
        let start = Instant::now();
        let unavailable = |e: std::io::Error| GeneratorError::BackendUnavailable(e.to_string());
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(unavailable)?;
        let input = serde_json::to_vec(request).expect("request serializes");
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(&input)
            .map_err(unavailable)?;
        let out = child.wait_with_output().map_err(unavailable)?;
        if !out.status.success() {
            return Err(GeneratorError::BackendUnavailable(format!(
                "local model exited with {}",
                out.status
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout).trim().to_string();
        if text.is_empty() {
            return Err(GeneratorError::BackendUnavailable(
                "local model produced no text".into(),
            ));
        }
        Ok(GeneratorReply {
            text,
            backend_id: self.id.clone(),
            latency: start.elapsed().as_secs_f64(),
        })
    }
}
