pub mod backbone;
pub mod doconv;
pub mod norm;
pub mod mdpm;
pub mod gsem;
pub mod dfim;
