pub mod fem;
pub mod geometry;
pub mod mesh;
pub mod modulus;
pub mod specfun;
