//! Placeholder while the quadrature backend is brought up.
