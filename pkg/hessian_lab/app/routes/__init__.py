# Experiment pipelines and verify suites
