pub mod primitive_checks;
