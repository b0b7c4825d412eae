//! Structure-preserving finite element solver for non-Newtonian
//! electrohydrodynamics: Carreau-fluid Navier-Stokes coupled to steric
//! Poisson-Nernst-Planck transport, discretized with Taylor-Hood elements,
//! a log-density transform for the ions and a BDF2 scalar auxiliary
//! variable time stepper.
pub mod cli;
pub mod fem;
pub mod io;
pub mod manufactured;
pub mod mesh;
pub mod model;
pub mod scenarios;
pub mod scheme;
pub mod sparse;
