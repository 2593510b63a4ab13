pub mod glm_oracle;
