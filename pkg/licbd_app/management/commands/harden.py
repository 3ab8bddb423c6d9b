from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Stage 2: finetune the backdoored encoder under random preprocessing'
    subcommand = 'harden'

    def report(self, result):
        super().report(result)
        if not (result.out_dir / 'sensitivity.json').exists():
            self.stdout.write(
                self.style.WARNING('No sensitivity map was found; triggers kept their learned selection')
            )
