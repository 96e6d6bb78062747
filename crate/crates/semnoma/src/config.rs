// experiment configuration (in progress)
