//! Unix-socket binding of [`Repository`].

use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::protocol::*;
use super::{MailboxEntry, Replacements, RepoError, Repository, ResourceBlobs, ResourceRecord};

fn dispatch(repo: &dyn Repository, op: Opcode, payload: &[u8]) -> Result<Vec<u8>, RepoError> {
    let mut c = Cursor::new(payload);
    let mut out = Fields::new();
    match op {
        Opcode::PutPublicKey => {
            let owner = c.str()?;
            let pk = c.get()?;
            let epoch = c.u32()?;
            c.finish()?;
            repo.put_public_key(&owner, pk, epoch)?;
        }
        Opcode::GetPublicKey => {
            let owner = c.str()?;
            c.finish()?;
            let (pk, epoch) = repo.get_public_key(&owner)?;
            out.put(&pk).u32(epoch);
        }
        Opcode::PutResource => {
            let record = decode_record(&mut c)?;
            let blobs = decode_blobs(&mut c)?;
            c.finish()?;
            out.str(&repo.put_resource(&record, &blobs)?.to_text());
        }
        Opcode::GetResource => {
            let owner = c.str()?;
            let name = c.str()?;
            c.finish()?;
            let (record, blobs) = repo.get_resource(&owner, &name)?;
            out.str(&record.to_text());
            encode_blobs(&mut out, &blobs);
        }
        Opcode::ListResources => {
            let owner = c.str()?;
            c.finish()?;
            let records = repo.list_resources(&owner)?;
            out.u32(records.len() as u32);
            for r in records {
                out.str(&r.to_text());
            }
        }
        Opcode::SwapRevocable => {
            let owner = c.str()?;
            let expected = c.u32()?;
            let pk = c.get()?;
            let repl = decode_replacements(&mut c)?;
            c.finish()?;
            out.u32(repo.swap_revocable(&owner, expected, &repl, pk)?);
        }
        Opcode::MailboxPost => {
            let recipient = c.str()?;
            let payload = c.get()?;
            c.finish()?;
            out.u64(repo.mailbox_post(&recipient, payload)?);
        }
        Opcode::MailboxFetch => {
            let recipient = c.str()?;
            let ack = c.get()?;
            c.finish()?;
            let ack = match ack.len() {
                0 => None,
                8 => Some(u64::from_be_bytes(ack.try_into().unwrap())),
                _ => return Err(RepoError::Invalid("malformed ack".into())),
            };
            encode_entries(&mut out, &repo.mailbox_fetch(&recipient, ack)?);
        }
    }
    Ok(out.finish())
}

fn serve_connection(repo: &dyn Repository, mut stream: UnixStream) {
    loop {
        let (code, payload) = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) | Err(_) => return,
        };
        let result = match Opcode::from_u8(code) {
            Some(op) => dispatch(repo, op, &payload),
            None => Err(RepoError::Invalid(format!("unknown opcode {code:#04x}"))),
        };
        let (status, body) = match result {
            Ok(body) => (Status::Ok, body),
            Err(e) => encode_error(&e),
        };
        if write_frame(&mut stream, status as u8, &body).is_err() {
            return;
        }
    }
}

/// A background server thread accepting connections on a socket path.
pub struct RepoServer {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl RepoServer {
    pub fn bind(path: &Path, repo: Arc<dyn Repository>) -> Result<Self, RepoError> {
        let listener = UnixListener::bind(path)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || accept_loop(listener, repo, &flag));
        Ok(RepoServer {
            path: path.to_path_buf(),
            stop,
            handle: Some(handle),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = UnixStream::connect(&self.path);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

impl Drop for RepoServer {
    fn drop(&mut self) {
        if self.handle.is_some() {
            self.stop_now();
        }
    }
}

fn accept_loop(listener: UnixListener, repo: Arc<dyn Repository>, stop: &AtomicBool) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        if let Ok(stream) = stream {
            let repo = repo.clone();
            std::thread::spawn(move || serve_connection(repo.as_ref(), stream));
        }
    }
}

/// Serves on `path` until the process exits.
pub fn serve_blocking(path: &Path, repo: Arc<dyn Repository>) -> Result<(), RepoError> {
    let listener = UnixListener::bind(path)?;
    accept_loop(listener, repo, &AtomicBool::new(false));
    Ok(())
}

/// Client side of the socket protocol; one connection per request.
#[derive(Debug, Clone)]
pub struct RemoteRepo {
    path: PathBuf,
}

impl RemoteRepo {
    pub fn new(path: &Path) -> Self {
        RemoteRepo {
            path: path.to_path_buf(),
        }
    }

    fn call(&self, op: Opcode, payload: &[u8]) -> Result<Vec<u8>, RepoError> {
        let mut stream = UnixStream::connect(&self.path)?;
        write_frame(&mut stream, op as u8, payload)?;
        let (status, body) =
            read_frame(&mut stream)?.ok_or_else(|| RepoError::Io("connection closed".into()))?;
        if status == Status::Ok as u8 {
            Ok(body)
        } else {
            Err(decode_error(&body))
        }
    }
}

impl Repository for RemoteRepo {
    fn put_public_key(&self, owner: &str, pk: &[u8], epoch: u32) -> Result<(), RepoError> {
        let body = self.call(
            Opcode::PutPublicKey,
            &Fields::new().str(owner).put(pk).u32(epoch).finish(),
        )?;
        Cursor::new(&body).finish()
    }

    fn get_public_key(&self, owner: &str) -> Result<(Vec<u8>, u32), RepoError> {
        let body = self.call(Opcode::GetPublicKey, &Fields::new().str(owner).finish())?;
        let mut c = Cursor::new(&body);
        let out = (c.get()?.to_vec(), c.u32()?);
        c.finish()?;
        Ok(out)
    }

    fn put_resource(
        &self,
        record: &ResourceRecord,
        blobs: &ResourceBlobs,
    ) -> Result<ResourceRecord, RepoError> {
        let mut f = Fields::new();
        f.str(&record.to_text());
        encode_blobs(&mut f, blobs);
        let body = self.call(Opcode::PutResource, &f.finish())?;
        let mut c = Cursor::new(&body);
        let r = decode_record(&mut c)?;
        c.finish()?;
        Ok(r)
    }

    fn get_resource(
        &self,
        owner: &str,
        name: &str,
    ) -> Result<(ResourceRecord, ResourceBlobs), RepoError> {
        let body = self.call(
            Opcode::GetResource,
            &Fields::new().str(owner).str(name).finish(),
        )?;
        let mut c = Cursor::new(&body);
        let out = (decode_record(&mut c)?, decode_blobs(&mut c)?);
        c.finish()?;
        Ok(out)
    }

    fn list_resources(&self, owner: &str) -> Result<Vec<ResourceRecord>, RepoError> {
        let body = self.call(Opcode::ListResources, &Fields::new().str(owner).finish())?;
        let mut c = Cursor::new(&body);
        let n = c.u32()?;
        let out = (0..n)
            .map(|_| decode_record(&mut c))
            .collect::<Result<_, _>>()?;
        c.finish()?;
        Ok(out)
    }

    fn swap_revocable(
        &self,
        owner: &str,
        expected_epoch: u32,
        replacements: &Replacements,
        new_pk: &[u8],
    ) -> Result<u32, RepoError> {
        let mut f = Fields::new();
        f.str(owner).u32(expected_epoch).put(new_pk);
        encode_replacements(&mut f, replacements);
        let body = self.call(Opcode::SwapRevocable, &f.finish())?;
        let mut c = Cursor::new(&body);
        let e = c.u32()?;
        c.finish()?;
        Ok(e)
    }

    fn mailbox_post(&self, recipient: &str, payload: &[u8]) -> Result<u64, RepoError> {
        let body = self.call(
            Opcode::MailboxPost,
            &Fields::new().str(recipient).put(payload).finish(),
        )?;
        let mut c = Cursor::new(&body);
        let seq = c.u64()?;
        c.finish()?;
        Ok(seq)
    }

    fn mailbox_fetch(
        &self,
        recipient: &str,
        ack_through: Option<u64>,
    ) -> Result<Vec<MailboxEntry>, RepoError> {
        let ack = ack_through
            .map(|a| a.to_be_bytes().to_vec())
            .unwrap_or_default();
        let body = self.call(
            Opcode::MailboxFetch,
            &Fields::new().str(recipient).put(&ack).finish(),
        )?;
        let mut c = Cursor::new(&body);
        let out = decode_entries(&mut c)?;
        c.finish()?;
        Ok(out)
    }
}
