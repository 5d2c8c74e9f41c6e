//! Field-map tag registry, one module per frame family.

pub mod hello {
    pub const VERSION: u8 = 1;
    pub const MODE: u8 = 2;
    pub const SECURITY: u8 = 3;
    pub const BUFFER_SIZE: u8 = 4;
    pub const STREAM_COUNT: u8 = 5;
    pub const NONCE: u8 = 6;
    pub const TRANSFER_ID: u8 = 7;
    pub const STREAM_INDEX: u8 = 8;
    pub const SESSION_ID: u8 = 9;
}

pub mod auth {
    pub const USERNAME: u8 = 1;
    pub const PROOF: u8 = 2;
    pub const ACCOUNT_TYPE: u8 = 3;
}

pub mod error {
    pub const CODE: u8 = 1;
    pub const MESSAGE: u8 = 2;
}

pub mod dfs {
    pub const OP: u8 = 1;
    pub const REQUEST_ID: u8 = 2;
    pub const PATH: u8 = 3;
    pub const OFFSET: u8 = 4;
    pub const LENGTH: u8 = 5;
    pub const DATA: u8 = 6;
    pub const SEEK_ORIGIN: u8 = 7;
    pub const STATUS: u8 = 8;
    pub const LOCK_ID: u8 = 9;
    pub const SIZE: u8 = 10;
    pub const MESSAGE: u8 = 11;
    pub const EXISTS: u8 = 12;
}

pub mod xfer {
    pub const TRANSFER_ID: u8 = 1;
    pub const PATH: u8 = 2;
    pub const REGION_OFFSET: u8 = 3;
    pub const REGION_LENGTH: u8 = 4;
    pub const CHUNK_SIZE: u8 = 5;
    pub const STREAM_COUNT: u8 = 6;
    pub const DIRECTION: u8 = 7;
    pub const FILE_SIZE: u8 = 8;
    pub const BITMAP: u8 = 9;
    pub const MD5: u8 = 10;
    pub const RESUME: u8 = 11;
    pub const STATUS: u8 = 12;
    pub const MEMORY: u8 = 13;
    pub const TASK_SET: u8 = 14;
    pub const RANGES: u8 = 15;
    pub const MESSAGE: u8 = 16;
    pub const BYTES: u8 = 17;
}

pub mod task {
    pub const SET_ID: u8 = 1;
    pub const TASKS: u8 = 2;
    pub const STATE: u8 = 3;
    pub const RESULTS: u8 = 4;
    pub const DIGESTS: u8 = 5;
    pub const MESSAGE: u8 = 6;
    pub const ACTION: u8 = 7;
    pub const DEPENDENCIES: u8 = 8;
    pub const OUTPUTS: u8 = 9;
    pub const MORE: u8 = 10;
    pub const COUNT: u8 = 11;
}

pub mod crypt {
    pub const TASK: u8 = 1;
    pub const PART_NUM: u8 = 2;
    pub const HOLDER: u8 = 3;
    pub const BLOCK_FILE: u8 = 4;
    pub const LENGTH: u8 = 5;
    pub const STATUS: u8 = 6;
    pub const MESSAGE: u8 = 7;
    pub const MD5: u8 = 8;
}

/// Tag of the sealed sub-map that carries sensitive fields when a frame is
/// only partially sealed.
pub const SEALED_FIELDS: u8 = 0xFF;
