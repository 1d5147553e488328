pub mod autodiff;
pub mod cli;
pub mod eval;
pub mod loss;
pub mod mesh;
pub mod model;
pub mod pde;
pub mod stencil;
pub mod train;
