//! Forward/backward kernels. The graph validates shapes before calling in,
//! so kernels assume well-formed arguments.

pub mod channel;
pub mod conv;
pub mod dense;
pub mod elementwise;
pub mod norm;
pub mod pool;

pub use conv::Conv2dParams;
pub use norm::{RunningStats, BN_EPS, BN_MOMENTUM};
pub use pool::PoolParams;
