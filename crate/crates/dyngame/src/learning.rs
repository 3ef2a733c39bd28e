//! Inverse problem: learning parameters from demonstrations. (in progress)
