//! Episodes, note preprocessing, file formats, dataset loading and the
//! synthetic generator.

mod dataset;
mod episode;
mod io;
mod preprocess;
mod synthetic;

pub use dataset::{
    episode_files, load_dataset, load_dataset_with_seed, read_dir_episodes, split_of, Dataset, Split,
};
pub use episode::{end_of_day, hour_bucket, Episode, Labels, NoteRecord};
pub use io::{episode_from_json, episode_to_json, read_episodes, write_episodes, Rejection};
pub use preprocess::{preprocess_notes, Preprocessed};
pub use synthetic::{
    generate_synthetic, label_summary, library, phenotype_concepts, planted_labels, step_concepts,
    write_synthetic, Evidence, LibraryConcept, Rule, SyntheticData, SyntheticSpec, PALLIATIVE_CARE,
};
