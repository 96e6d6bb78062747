// orchestration (in progress)
