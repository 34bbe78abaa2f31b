//! Small numerical kernels shared by the modules: bracketed root finding,
//! quadrature, derivative-free minimization and order statistics.

pub mod optim;
pub mod quad;
pub mod roots;
pub mod stats;
