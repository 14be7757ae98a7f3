use serde::{Deserialize, Serialize};

use crate::cluster::NodeList;
use crate::raftlog::SecondLevelRef;
use crate::store::{ChunkKey, EntryKind, ExtKey, ExternalBase, InodeKind, InodeMeta, StageId};
use crate::{InodeId, Tick};

/// What a coordinator asks one participant to prepare. The participant
/// checks preconditions against its locked state and turns intents into the
/// concrete commands it logs and later applies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Intent {
    /// New inode; the id must not exist yet. Id 0 is a placeholder the
    /// coordinator replaces with a freshly allocated id.
    Create { meta: InodeMeta },
    /// Raise the file size to at least `end` after a flush. `persisted` and
    /// `valid` must still match the metadata the writer used to compute
    /// external bases.
    ExtendSize { inode: InodeId, end: u64, mtime: Tick, persisted: Option<ExtKey>, valid: u64 },
    SetSize { inode: InodeId, size: u64, expect_size: u64, mtime: Tick },
    MarkDeleted { inode: InodeId, kind: InodeKind, expect_size: Option<u64>, mtime: Tick },
    /// Rebind the object key after a rename. `valid` must match the
    /// metadata used to pin the chunks; the old object is no longer read.
    Rebind { inode: InodeId, key: ExtKey, valid: u64, mtime: Tick },
    /// Require that `dir` has no entries (directory rename and rmdir).
    RequireEmpty { dir: InodeId },
    DirAdd { dir: InodeId, name: String, child: InodeId, kind: EntryKind, replace: Option<InodeId>, mtime: Tick },
    DirRemove { dir: InodeId, name: String, expect_child: InodeId, mtime: Tick },
    /// Commit staged writes into the chunk.
    Fold { chunk: ChunkKey, stages: Vec<StageId>, base: Option<ExternalBase> },
    TruncateChunk { chunk: ChunkKey, size: u64, mtime: Tick },
    DeleteChunk { chunk: ChunkKey, mtime: Tick },
    /// Copy the chunk's external bytes into local storage.
    PinChunk { chunk: ChunkKey, base: Option<ExternalBase> },
    /// Clear the dirty flag of metadata at `version` once its content is
    /// stored under `key`.
    PersistMeta { inode: InodeId, version: u64, key: Option<ExtKey>, generation: u64, size: u64 },
    /// Upload this chunk as one multipart part and clear its dirty flag on
    /// commit.
    PersistChunk {
        chunk: ChunkKey,
        expected_len: u64,
        base: Option<ExternalBase>,
        upload_id: u64,
        part: u32,
    },
    /// Clear the dirty flag of a chunk uploaded by the coordinator itself.
    ClearChunk { chunk: ChunkKey, version: u64, compacted: Option<(SecondLevelRef, u64)> },
    NodeList { list: NodeList },
}

impl Intent {
    pub fn touches_meta(&self) -> bool {
        !matches!(
            self,
            Intent::Fold { .. }
                | Intent::TruncateChunk { .. }
                | Intent::DeleteChunk { .. }
                | Intent::PinChunk { .. }
                | Intent::PersistChunk { .. }
                | Intent::ClearChunk { .. }
        )
    }
}
