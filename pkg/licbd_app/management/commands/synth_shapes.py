from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Render the synthetic shapes segmentation corpus into <out>/shapes'
    subcommand = 'synth-shapes'
