use crate::error::PipelineError;
use crate::gateway::{ChatExchange, Gateway, ModelSettings};
use crate::prompt::{Bindings, TemplateId, TemplateSet};

/// Everything an agent call needs: transport, model settings and templates.
#[derive(Clone, Copy)]
pub struct AgentContext<'a> {
    pub gateway: &'a Gateway,
    pub settings: &'a ModelSettings,
    pub templates: &'a TemplateSet,
}

impl<'a> AgentContext<'a> {
    pub fn new(gateway: &'a Gateway, settings: &'a ModelSettings, templates: &'a TemplateSet) -> Self {
        Self {
            gateway,
            settings,
            templates,
        }
    }

    /// Render `template` and send it as a single system+user exchange.
    pub fn ask(
        &self,
        template: TemplateId,
        bindings: &Bindings,
        tag: impl Into<String>,
    ) -> Result<ChatExchange, PipelineError> {
        let prompt = self.templates.render(template, bindings)?;
        let request = self.settings.request(tag, prompt.system_text, prompt.user_text);
        Ok(self.gateway.complete(request)?)
    }
}
