pub mod container;
pub mod da;
pub mod epi;
pub mod gan;
pub mod pipeline;
pub mod pod;
pub mod predgan;
pub mod tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/reduced_order.md")]
    mod reduced_order {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/gan.md")]
    mod gan {}
    #[doc = include_str!("../../../book/src/surrogate.md")]
    mod surrogate {}
    #[doc = include_str!("../../../book/src/assimilation.md")]
    mod assimilation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
