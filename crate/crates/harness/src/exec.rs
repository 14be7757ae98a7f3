//! Runs trace operations against a cluster client.

use cachefs::fsops::Client;
use cachefs::store::EntryKind;
use cachefs::FsError;

use crate::workload::{Op, Outcome};

/// The error's variant name, without its payload.
pub fn error_name(e: &FsError) -> String {
    let dbg = format!("{e:?}");
    dbg.split(['(', ' ', '{']).next().unwrap_or_default().to_string()
}

fn done(r: Result<impl Sized, FsError>) -> Outcome {
    match r {
        Ok(_) => Outcome::Done,
        Err(e) => Outcome::Failed(error_name(&e)),
    }
}

pub async fn apply(client: &Client, op: &Op) -> Outcome {
    match op {
        Op::Mkdir { path } => done(client.mkdir(path).await),
        Op::Create { path } => done(client.create(path).await),
        Op::Write { path, offset, data } => done(client.write(path, *offset, data).await),
        Op::Read { path, offset, len } => match client.read(path, *offset, *len).await {
            Ok(d) => Outcome::Data(d),
            Err(e) => Outcome::Failed(error_name(&e)),
        },
        Op::Truncate { path, size } => done(client.truncate(path, *size).await),
        Op::Unlink { path } => done(client.unlink(path).await),
        Op::Rmdir { path } => done(client.rmdir(path).await),
        Op::Rename { from, to } => done(client.rename(from, to).await),
        Op::Readdir { path } => match client.readdir(path).await {
            Ok(l) => Outcome::Listing(l.into_iter().map(|(n, k)| (n, k == EntryKind::Directory)).collect()),
            Err(e) => Outcome::Failed(error_name(&e)),
        },
        Op::Fsync { path } => done(client.fsync(path).await),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_drop_payloads() {
        assert_eq!(error_name(&FsError::NotFound), "NotFound");
        assert_eq!(error_name(&FsError::Unsupported("x y".into())), "Unsupported");
        assert_eq!(error_name(&FsError::Usage("..".into())), "Usage");
    }
}
