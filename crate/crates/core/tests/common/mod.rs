pub mod model_fd;
