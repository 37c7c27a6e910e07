//! Out-of-process language model. Each request is two VCT1 tensors on the
//! server's stdin (the [K, d] prefix, then the token ids as a float vector);
//! the reply is one VCT1 tensor of next-token logits on its stdout.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::lm::{check_prefix, DecoderLm};
use super::{PrefixTokens, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalLmSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub vocab_size: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub eos_token: Option<TokenId>,
}

struct Session {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Inference-only adapter; the server process is started on first use and
/// shut down when the adapter is dropped.
pub struct ExternalLm {
    spec: ExternalLmSpec,
    session: Mutex<Option<Session>>,
}

impl std::fmt::Debug for ExternalLm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalLm").field("spec", &self.spec).finish()
    }
}

impl ExternalLm {
    pub fn new(spec: ExternalLmSpec) -> Self {
        ExternalLm {
            spec,
            session: Mutex::new(None),
        }
    }

    pub fn spec(&self) -> &ExternalLmSpec {
        &self.spec
    }

    fn spawn(&self) -> Result<Session> {
        let mut child = Command::new(&self.spec.command)
            .args(&self.spec.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {}: {e}", self.spec.command)))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Session { child, stdin, stdout })
    }
}

impl Drop for ExternalLm {
    fn drop(&mut self) {
        if let Ok(slot) = self.session.get_mut() {
            if let Some(mut s) = slot.take() {
                drop(s.stdin);
                let _ = s.child.wait();
            }
        }
    }
}

impl DecoderLm for ExternalLm {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.spec.eos_token
    }

    fn next_token_logits(&self, prefix: &PrefixTokens, tokens: &[TokenId]) -> Result<Vec<f64>> {
        check_prefix(self, prefix)?;
        let mut guard = self
            .session
            .lock()
            .map_err(|_| Error::Backend("language model session poisoned".into()))?;
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let s = guard.as_mut().expect("session present");
        let backend = |e: std::io::Error| Error::Backend(format!("{}: {e}", self.spec.command));
        let ids = Tensor::vector(tokens.iter().map(|&t| f64::from(t)).collect());
        prefix.as_tensor().write_to(&mut s.stdin, DType::F64).map_err(backend)?;
        ids.write_to(&mut s.stdin, DType::F64).map_err(backend)?;
        s.stdin.flush().map_err(backend)?;
        let logits = Tensor::read_from(&mut s.stdout).map_err(backend)?;
        if logits.shape() != [self.spec.vocab_size] {
            return Err(Error::Backend(format!(
                "server replied with logits of shape {:?}, expected [{}]",
                logits.shape(),
                self.spec.vocab_size
            )));
        }
        Ok(logits.into_data())
    }
}

/// Answers requests from `input` with `lm` until the stream ends.
pub fn serve_lm(lm: &dyn DecoderLm, input: impl std::io::Read, output: impl Write) -> Result<()> {
    let mut input = BufReader::new(input);
    let mut output = BufWriter::new(output);
    let io = |e: std::io::Error| Error::Backend(format!("language model server: {e}"));
    loop {
        if input.fill_buf().map_err(io)?.is_empty() {
            return Ok(());
        }
        let prefix = PrefixTokens::new(Tensor::read_from(&mut input).map_err(io)?)?;
        let ids = Tensor::read_from(&mut input).map_err(io)?;
        let tokens = ids
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(TokenId::MAX) {
                    Ok(v as TokenId)
                } else {
                    Err(Error::Validation(format!("token id {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let logits = lm.next_token_logits(&prefix, &tokens)?;
        Tensor::vector(logits).write_to(&mut output, DType::F64).map_err(io)?;
        output.flush().map_err(io)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::lm::TableLm;

    #[test]
    fn server_answers_each_request() {
        let mut lm = TableLm::new(3, 2, Some(0));
        lm.set(vec![], vec![0.1, 0.2, 0.3]);
        lm.set(vec![2], vec![1.0, 0.0, -1.0]);
        let prefix = PrefixTokens::new(Tensor::zeros(&[1, 2])).unwrap();
        let mut req = Vec::new();
        for toks in [vec![], vec![2.0]] {
            prefix.as_tensor().write_to(&mut req, DType::F64).unwrap();
            Tensor::vector(toks).write_to(&mut req, DType::F64).unwrap();
        }
        let mut resp = Vec::new();
        serve_lm(&lm, req.as_slice(), &mut resp).unwrap();
        let mut r = resp.as_slice();
        assert_eq!(Tensor::read_from(&mut r).unwrap().data(), [0.1, 0.2, 0.3]);
        assert_eq!(Tensor::read_from(&mut r).unwrap().data(), [1.0, 0.0, -1.0]);
        assert!(r.is_empty());
    }

    #[test]
    fn missing_server_is_a_backend_error() {
        let lm = ExternalLm::new(ExternalLmSpec {
            command: "/nonexistent/volcap-lm".into(),
            args: vec![],
            vocab_size: 3,
            embed_dim: 2,
            eos_token: Some(0),
        });
        let prefix = PrefixTokens::new(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(lm.next_token_logits(&prefix, &[]), Err(Error::Backend(_))));
    }
}
