pub mod autodiff;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod poswalk;
pub mod rng;
pub mod sparse;
pub mod split;
pub mod students;
pub mod synth;
pub mod teacher;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use graph::{load_bundle, AdjacencyScheme, SparseGraph};
pub use split::{make_split, SplitMode, SplitSpec};
pub use teacher::{TeacherConfig, TeacherKind, TeacherModel};
pub use tensor::NdArray;
pub use distill::{DistillConfig, Reliability};
pub use harness::{RunConfig, RunResult, ScoreBoard};
pub use students::{StudentArch, StudentKind, StudentModel};
