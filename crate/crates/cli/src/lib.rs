//! Library half of the `jigsaw` binary: the SPB verification suite, shared
//! with the acceptance tests.

pub mod verify;
