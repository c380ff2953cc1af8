//! Built-in model configurations used by the CLI defaults and the
//! acceptance run. Any of them can be replaced with `--config <file>`.

use erwin_core::model::ErwinConfig;

use crate::error::Result;

/// Three-stage 3D model for the scaling benchmarks.
pub const BENCH: &str = r#"
dim = 3
out-features = 1
enc-channels = [8, 16, 32]
enc-depths = [2, 2, 2]
enc-heads = [1, 2, 4]
strides = [4, 4]
dec-depths = [1, 1]
dec-heads = [1, 2]
ball-sizes = [16]
mpnn-dim = 8
mpnn-steps = 1
mpnn-knn = 8
"#;

/// One block of plain ball attention: the receptive field of a point is its
/// own leaf ball.
pub const PROBE_ATTENTION: &str = r#"
dim = 2
in-features = 2
out-features = 1
enc-channels = [8]
enc-depths = [1]
enc-heads = [2]
ball-sizes = [16]
mpnn-steps = 0
rotate = false
"#;

/// Six message-passing steps over the 16-nearest-neighbour graph and no
/// attention.
pub const PROBE_MPNN: &str = r#"
dim = 2
in-features = 2
out-features = 1
enc-channels = [8]
enc-depths = [0]
enc-heads = [1]
ball-sizes = [16]
mpnn-dim = 8
mpnn-steps = 6
mpnn-knn = 16
"#;

/// Full encoder/decoder whose coarsest stage is a single ball over 1024
/// slots (clouds of 513–1024 points).
pub const PROBE_FULL: &str = r#"
dim = 2
in-features = 2
out-features = 1
enc-channels = [8, 16, 32]
enc-depths = [1, 1, 1]
enc-heads = [2, 2, 2]
strides = [8, 8]
dec-depths = [1, 1]
dec-heads = [2, 2]
ball-sizes = [16]
mpnn-dim = 8
mpnn-steps = 1
mpnn-knn = 8
"#;

/// Two blocks on a 4×4 grid: ball of four, second block rotated.
pub const CROSS_BALL: &str = r#"
dim = 2
in-features = 1
out-features = 1
enc-channels = [8]
enc-depths = [2]
enc-heads = [2]
ball-sizes = [4]
mpnn-steps = 0
"#;

/// Small model for the synthetic training tasks.
pub const TRAIN: &str = r#"
dim = 2
out-features = 1
enc-channels = [16, 32]
enc-depths = [1, 1]
enc-heads = [2, 4]
strides = [4]
dec-depths = [1]
dec-heads = [2]
ball-sizes = [16]
mpnn-dim = 16
mpnn-steps = 1
mpnn-knn = 8
"#;

pub fn load(text: &str) -> Result<ErwinConfig> {
    Ok(ErwinConfig::from_toml_str(text)?)
}
