//! CSV and text-file import/export. (in progress)
