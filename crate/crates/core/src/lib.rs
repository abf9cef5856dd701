pub mod tensor;
pub mod encoder;
pub mod par;
pub mod seeding;
pub mod vocab;
pub mod corpus;
pub mod entity_vocab;
pub mod optim;
pub mod checkpoint;
pub mod pretrain;
pub mod linker;
pub mod tasks;
pub mod cloze;
pub mod align;
pub mod config;
pub mod synthetic;
pub mod cli;
